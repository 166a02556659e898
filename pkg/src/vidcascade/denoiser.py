"""Space-time-separable video denoiser with conditioning plumbing.

The network is a small U-Net over (batch, frames, height, width, channels)
activations. Spatial convs, spatial attention, and group normalization act
per frame with shared weights; the only cross-frame paths are the temporal
mixer blocks (self-attention for the base stage, convolutions for the
super-resolution stages). Each temporal mixer is a residual branch multiplied
by a per-element gate that is zero for packed single-image batch elements, so
images ride through as independent single-frame videos: their outputs are
untouched by, and contribute exactly zero gradient to, every temporal-mixer
parameter.

Conditioning enters three ways: the log-SNR of the noisy input (plus the
augmentation log-SNR for super-resolution stages) through a sinusoidal
embedding and per-block projections; the pooled text vector added into that
same pathway; and the per-token text embeddings as extra attention keys and
values inside every spatial attention block. Super-resolution stages also see
the upsampled previous-stage video concatenated channelwise onto the noisy
input.

The network is fully convolutional when spatial attention is disabled
everywhere, so a model built at one resolution accepts larger inputs; graphs
are cached per input shape while parameters stay resolution-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .graph import Graph, GraphBuilder, GraphError, eval_graph
from .tensor import Tensor, TensorError
from .textenc import TextEmbedding, null_embedding


class StageKind(Enum):
    BASE = "base"
    SSR = "ssr"
    TSR = "tsr"


class TemporalMixer(Enum):
    ATTENTION = "attention"
    CONV = "conv"


@dataclass(frozen=True)
class DenoiserConfig:
    stage_kind: StageKind
    frames: int
    height: int
    width: int
    channels: tuple[int, ...]
    spatial_attention: tuple[bool, ...]
    temporal_mixer: tuple[TemporalMixer, ...]
    text_cond: bool = True
    cond_channels: int = 0
    embed_dim: int = 16
    max_tokens: int = 8
    cond_dim: int = 32
    groups: int = 4
    heads: int = 2

    def __post_init__(self):
        levels = len(self.channels)
        if levels < 1:
            raise TensorError("denoiser needs at least one resolution level")
        if len(self.spatial_attention) != levels or len(self.temporal_mixer) != levels:
            raise TensorError("per-level config lists must have equal length")
        if self.stage_kind == StageKind.BASE:
            if any(m != TemporalMixer.ATTENTION for m in self.temporal_mixer):
                raise TensorError("base stage mixes frames with temporal attention at all levels")
            if self.cond_channels != 0:
                raise TensorError("base stage takes no conditioning video channels")
        else:
            if any(m != TemporalMixer.CONV for m in self.temporal_mixer):
                raise TensorError("super-resolution stages use temporal convolutions, not attention")
            if self.cond_channels <= 0:
                raise TensorError("super-resolution stages require conditioning video channels")
        factor = 1 << (levels - 1)
        if self.height % factor or self.width % factor:
            raise TensorError(
                f"spatial dims {self.height}x{self.width} must divide by {factor} for {levels} levels"
            )
        for c in self.channels:
            if c % self.groups:
                raise TensorError(f"channel count {c} not divisible by {self.groups} norm groups")
            if c % self.heads:
                raise TensorError(f"channel count {c} not divisible by {self.heads} attention heads")
        if self.frames < 1:
            raise TensorError("frames must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def in_channels(self) -> int:
        return 3 + self.cond_channels


@dataclass(frozen=True)
class FrameMask:
    """Per-batch-element frame validity plus temporal-independence flags.

    `valid[b, f]` marks real frames (False slots are zero padding ignored by
    the loss). `independent[b]` marks packed-image elements whose frames must
    not mix; videos keep it False with all frames valid.
    """

    valid: np.ndarray
    independent: np.ndarray

    def __post_init__(self):
        if self.valid.ndim != 2 or self.independent.shape != (self.valid.shape[0],):
            raise TensorError("frame mask needs valid (B,F) and independent (B,)")

    @staticmethod
    def video(batch: int, frames: int) -> "FrameMask":
        return FrameMask(np.ones((batch, frames), dtype=bool), np.zeros(batch, dtype=bool))


@dataclass(frozen=True)
class ConditioningBundle:
    """Batched conditioning: text embeddings plus optional low-res video.

    aug_log_snr is the log-SNR of the noise added to cond_video; it must be
    present exactly when cond_video is.
    """

    token_embeddings: Tensor          # (B, T, embed_dim)
    pooled: Tensor                    # (B, embed_dim)
    text_mask: np.ndarray             # (B, T) bool
    cond_video: Tensor | None = None  # (B, F, H, W, cond_channels)
    aug_log_snr: float | np.ndarray | None = None

    def __post_init__(self):
        if (self.cond_video is None) != (self.aug_log_snr is None):
            raise TensorError("aug_log_snr must accompany cond_video (and only then)")

    @property
    def batch(self) -> int:
        return self.token_embeddings.shape[0]


def bundle_from_texts(
    texts: list[TextEmbedding],
    cond_video: Tensor | None = None,
    aug_log_snr: float | np.ndarray | None = None,
) -> ConditioningBundle:
    tokens = np.stack([t.tokens.data for t in texts])
    pooled = np.stack([t.pooled.data for t in texts])
    mask = np.stack([t.mask for t in texts])
    return ConditioningBundle(
        token_embeddings=Tensor(tokens, _trusted=True),
        pooled=Tensor(pooled, _trusted=True),
        text_mask=mask,
        cond_video=cond_video,
        aug_log_snr=aug_log_snr,
    )


def drop_text(cond: ConditioningBundle, embed_dim: int, max_tokens: int) -> ConditioningBundle:
    """The classifier-free unconditional twin: text nulled, video kept."""
    null = null_embedding(embed_dim, max_tokens)
    b = cond.batch
    return ConditioningBundle(
        token_embeddings=Tensor(np.broadcast_to(null.tokens.data, (b, *null.tokens.shape)).copy(), _trusted=True),
        pooled=Tensor(np.broadcast_to(null.pooled.data, (b, *null.pooled.shape)).copy(), _trusted=True),
        text_mask=np.zeros((b, max_tokens), dtype=bool),
        cond_video=cond.cond_video,
        aug_log_snr=cond.aug_log_snr,
    )


# ---------------------------------------------------------------------------
# Parameter inventory
# ---------------------------------------------------------------------------

def _param_specs(cfg: DenoiserConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init) list; independent of input resolution."""
    specs: list[tuple[str, tuple[int, ...], str]] = []

    def conv2(prefix, cin, cout, zero=False):
        specs.append((f"{prefix}.w", (3, 3, cin, cout), "zeros" if zero else "conv"))
        specs.append((f"{prefix}.b", (cout,), "zeros"))

    def conv1x1(prefix, cin, cout):
        specs.append((f"{prefix}.w", (1, 1, cin, cout), "conv"))

    def convt(prefix, cin, cout, zero=False):
        specs.append((f"{prefix}.w", (3, cin, cout), "zeros" if zero else "conv"))
        specs.append((f"{prefix}.b", (cout,), "zeros"))

    def linear(prefix, cin, cout, zero=False):
        specs.append((f"{prefix}.w", (cin, cout), "zeros" if zero else "linear"))
        specs.append((f"{prefix}.b", (cout,), "zeros"))

    def norm(prefix, c):
        specs.append((f"{prefix}.g", (c,), "ones"))
        specs.append((f"{prefix}.b", (c,), "zeros"))

    def resblock(prefix, cin, cout):
        norm(f"{prefix}.n1", cin)
        conv2(f"{prefix}.c1", cin, cout)
        linear(f"{prefix}.cond", cfg.cond_dim, cout)
        norm(f"{prefix}.n2", cout)
        conv2(f"{prefix}.c2", cout, cout, zero=True)
        if cin != cout:
            conv1x1(f"{prefix}.sc", cin, cout)

    def spatial_attn(prefix, c):
        norm(f"{prefix}.n", c)
        for n in ("q", "k", "v"):
            specs.append((f"{prefix}.{n}", (c, c), "linear"))
        if cfg.text_cond:
            specs.append((f"{prefix}.tk", (cfg.embed_dim, c), "linear"))
            specs.append((f"{prefix}.tv", (cfg.embed_dim, c), "linear"))
        linear(f"{prefix}.o", c, c, zero=True)

    def temporal(prefix, c, mixer):
        norm(f"{prefix}.n", c)
        if mixer == TemporalMixer.ATTENTION:
            for n in ("q", "k", "v"):
                specs.append((f"{prefix}.{n}", (c, c), "linear"))
            linear(f"{prefix}.o", c, c, zero=True)
        else:
            convt(f"{prefix}.c1", c, c)
            convt(f"{prefix}.c2", c, c, zero=True)

    # Conditioning MLP: sinusoidal log-SNR features plus pooled text.
    linear("cond.t1", cfg.cond_dim, cfg.cond_dim)
    linear("cond.pool", cfg.embed_dim, cfg.cond_dim)
    linear("cond.t2", cfg.cond_dim, cfg.cond_dim)

    conv2("stem", cfg.in_channels, cfg.channels[0])
    prev = cfg.channels[0]
    for i, c in enumerate(cfg.channels):
        resblock(f"down{i}.res", prev, c)
        if cfg.spatial_attention[i]:
            spatial_attn(f"down{i}.attn", c)
        temporal(f"down{i}.tmix", c, cfg.temporal_mixer[i])
        prev = c
    resblock("mid.res", prev, prev)
    for i in reversed(range(cfg.levels)):
        c = cfg.channels[i]
        resblock(f"up{i}.res", prev + c, c)
        if cfg.spatial_attention[i]:
            spatial_attn(f"up{i}.attn", c)
        temporal(f"up{i}.tmix", c, cfg.temporal_mixer[i])
        prev = c
    norm("head.n", prev)
    conv2("head.out", prev, 3, zero=True)
    return specs


def parameter_count(cfg: DenoiserConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _param_specs(cfg))


def _init_params(cfg: DenoiserConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in _param_specs(cfg):
        if kind == "zeros":
            arr = np.zeros(shape, dtype=np.float32)
        elif kind == "ones":
            arr = np.ones(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[:-1]))
            std = math.sqrt((2.0 if kind == "conv" else 1.0) / fan_in)
            arr = (rng.standard_normal(shape) * std).astype(np.float32)
        params[name] = Tensor(arr, _trusted=True)
    return params


# ---------------------------------------------------------------------------
# Graph assembly
# ---------------------------------------------------------------------------

def _emit_network(b: GraphBuilder, cfg: DenoiserConfig, batch: int, frames: int,
                  height: int, width: int) -> str:
    """Declare inputs/params and emit the U-Net; returns the output node name."""
    for name, shape, _ in _param_specs(cfg):
        b.param(name, shape)

    b.input("z", (batch, frames, height, width, 3))
    b.input("emb", (batch, cfg.cond_dim))
    b.input("pooled", (batch, cfg.embed_dim))
    b.input("tgate", (batch, 1, 1, 1, 1))
    if cfg.cond_channels:
        b.input("cond_video", (batch, frames, height, width, cfg.cond_channels))
    if cfg.text_cond:
        b.input("tokens", (batch, cfg.max_tokens, cfg.embed_dim))
        sizes = sorted({(height // (1 << i)) * (width // (1 << i)) for i in range(cfg.levels)
                        if cfg.spatial_attention[i]})
        for hw in sizes:
            b.input(f"text_bias_{hw}", (batch * frames, 1, 1, hw + cfg.max_tokens))

    uid = iter(range(10**6))

    def nm(tag):
        return f"{tag}_{next(uid)}"

    def linear(x, prefix):
        h = b.op("matmul", nm(f"{prefix}.mm"), x, f"{prefix}.w")
        return b.op("add", nm(f"{prefix}.add"), h, f"{prefix}.b")

    def norm(x, prefix):
        n = b.op("groupnorm", nm(f"{prefix}.gn"), x, groups=cfg.groups, eps=1e-5)
        n = b.op("mul", nm(f"{prefix}.g"), n, f"{prefix}.g")
        return b.op("add", nm(f"{prefix}.b"), n, f"{prefix}.b")

    def conv2(x, prefix):
        p = b.op("pad_edge", nm(f"{prefix}.pad"), x, pads=((2, (1, 1)), (3, (1, 1))))
        h = b.op("conv_spatial", nm(f"{prefix}.conv"), p, f"{prefix}.w")
        return b.op("add", nm(f"{prefix}.bias"), h, f"{prefix}.b")

    # Conditioning vector shared by every resblock.
    ct = linear("emb", "cond.t1")
    cp = linear("pooled", "cond.pool")
    ch = b.op("add", nm("cond.sum"), ct, cp)
    ch = b.op("silu", nm("cond.act"), ch)
    cond_vec = linear(ch, "cond.t2")
    cond_vec = b.op("silu", nm("cond.act2"), cond_vec)

    def resblock(x, prefix, cin, cout):
        h = norm(x, f"{prefix}.n1")
        h = b.op("silu", nm(f"{prefix}.a1"), h)
        h = conv2(h, f"{prefix}.c1")
        cb = linear(cond_vec, f"{prefix}.cond")
        cb = b.op("reshape", nm(f"{prefix}.cbr"), cb, shape=(batch, 1, 1, 1, cout))
        h = b.op("add", nm(f"{prefix}.cadd"), h, cb)
        h = norm(h, f"{prefix}.n2")
        h = b.op("silu", nm(f"{prefix}.a2"), h)
        h = conv2(h, f"{prefix}.c2")
        if cin != cout:
            x = b.op("conv_spatial", nm(f"{prefix}.scconv"), x, f"{prefix}.sc.w")
        return b.op("add", nm(f"{prefix}.res"), x, h)

    def spatial_attn(x, prefix, c, hw):
        n = norm(x, f"{prefix}.n")
        tok = b.op("spatial_tokens", nm(f"{prefix}.tok"), n)
        q = b.op("matmul", nm(f"{prefix}.qm"), tok, f"{prefix}.q")
        k = b.op("matmul", nm(f"{prefix}.km"), tok, f"{prefix}.k")
        v = b.op("matmul", nm(f"{prefix}.vm"), tok, f"{prefix}.v")
        if cfg.text_cond:
            tk = b.op("matmul", nm(f"{prefix}.tkm"), "tokens", f"{prefix}.tk")
            tv = b.op("matmul", nm(f"{prefix}.tvm"), "tokens", f"{prefix}.tv")
            tk = b.op("repeat_tokens", nm(f"{prefix}.tkr"), tk, times=frames)
            tv = b.op("repeat_tokens", nm(f"{prefix}.tvr"), tv, times=frames)
            k = b.op("concat", nm(f"{prefix}.kc"), k, tk, axis=-2)
            v = b.op("concat", nm(f"{prefix}.vc"), v, tv, axis=-2)
            att = b.op("attention", nm(f"{prefix}.att"), q, k, v, f"text_bias_{hw}",
                       heads=cfg.heads)
        else:
            att = b.op("attention", nm(f"{prefix}.att"), q, k, v, heads=cfg.heads)
        o = linear(att, f"{prefix}.o")
        o = b.op("spatial_untokens", nm(f"{prefix}.untok"), o,
                 shape=_shape_of(b, x))
        return b.op("add", nm(f"{prefix}.res"), x, o)

    def temporal(x, prefix, c, mixer):
        n = norm(x, f"{prefix}.n")
        if mixer == TemporalMixer.ATTENTION:
            tok = b.op("temporal_tokens", nm(f"{prefix}.tok"), n)
            q = b.op("matmul", nm(f"{prefix}.qm"), tok, f"{prefix}.q")
            k = b.op("matmul", nm(f"{prefix}.km"), tok, f"{prefix}.k")
            v = b.op("matmul", nm(f"{prefix}.vm"), tok, f"{prefix}.v")
            att = b.op("attention", nm(f"{prefix}.att"), q, k, v, heads=cfg.heads)
            o = linear(att, f"{prefix}.o")
            branch = b.op("temporal_untokens", nm(f"{prefix}.untok"), o,
                          shape=_shape_of(b, x))
        else:
            h = b.op("silu", nm(f"{prefix}.a1"), n)
            p = b.op("pad_edge", nm(f"{prefix}.p1"), h, pads=((1, (1, 1)),))
            h = b.op("conv_temporal", nm(f"{prefix}.cv1"), p, f"{prefix}.c1.w")
            h = b.op("add", nm(f"{prefix}.b1"), h, f"{prefix}.c1.b")
            h = b.op("silu", nm(f"{prefix}.a2"), h)
            p = b.op("pad_edge", nm(f"{prefix}.p2"), h, pads=((1, (1, 1)),))
            h = b.op("conv_temporal", nm(f"{prefix}.cv2"), p, f"{prefix}.c2.w")
            branch = b.op("add", nm(f"{prefix}.b2"), h, f"{prefix}.c2.b")
        gated = b.op("mul", nm(f"{prefix}.gate"), branch, "tgate")
        return b.op("add", nm(f"{prefix}.res"), x, gated)

    if cfg.cond_channels:
        x = b.op("concat", "net_in", "z", "cond_video", axis=-1)
    else:
        x = "z"
    x = conv2(x, "stem")
    prev = cfg.channels[0]
    skips = []
    for i, c in enumerate(cfg.channels):
        x = resblock(x, f"down{i}.res", prev, c)
        if cfg.spatial_attention[i]:
            hw = _shape_of(b, x)[2] * _shape_of(b, x)[3]
            x = spatial_attn(x, f"down{i}.attn", c, hw)
        x = temporal(x, f"down{i}.tmix", c, cfg.temporal_mixer[i])
        skips.append(x)
        prev = c
        if i < cfg.levels - 1:
            x = b.op("avgpool_spatial", nm("pool"), x)
    x = resblock(x, "mid.res", prev, prev)
    for i in reversed(range(cfg.levels)):
        c = cfg.channels[i]
        if i < cfg.levels - 1:
            x = b.op("upsample_nearest", nm("up"), x)
        x = b.op("concat", nm("skip"), x, skips[i], axis=-1)
        x = resblock(x, f"up{i}.res", prev + c, c)
        if cfg.spatial_attention[i]:
            hw = _shape_of(b, x)[2] * _shape_of(b, x)[3]
            x = spatial_attn(x, f"up{i}.attn", c, hw)
        x = temporal(x, f"up{i}.tmix", c, cfg.temporal_mixer[i])
        prev = c
    x = norm(x, "head.n")
    x = b.op("silu", nm("head.act"), x)
    out = conv2(x, "head.out")
    return out


def _shape_of(b: GraphBuilder, name: str) -> tuple[int, ...]:
    return b.shape_of(name)


@lru_cache(maxsize=64)
def denoiser_graph(cfg: DenoiserConfig, batch: int, frames: int, height: int, width: int) -> Graph:
    b = GraphBuilder()
    out = _emit_network(b, cfg, batch, frames, height, width)
    b.op("reshape", "v_out", out, shape=(batch, frames, height, width, 3))
    return b.build(outputs=("v_out",))


@lru_cache(maxsize=64)
def training_graph(cfg: DenoiserConfig, batch: int, frames: int, height: int, width: int) -> Graph:
    """Network plus masked v-space squared-error head reduced to a scalar."""
    b = GraphBuilder()
    out = _emit_network(b, cfg, batch, frames, height, width)
    b.input("target", (batch, frames, height, width, 3))
    b.input("loss_weight", (batch, frames, 1, 1, 1))
    neg = b.op("scale", "neg_target", "target", factor=-1.0)
    diff = b.op("add", "diff", out, neg)
    sq = b.op("mul", "sq", diff, diff)
    weighted = b.op("mul", "weighted", sq, "loss_weight")
    b.op("sum", "loss", weighted)
    return b.build(outputs=("loss",))


# ---------------------------------------------------------------------------
# Denoiser object and forward pass
# ---------------------------------------------------------------------------

@dataclass
class Denoiser:
    config: DenoiserConfig
    params: dict[str, Tensor]

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())


def build_denoiser(config: DenoiserConfig, init_seed: int) -> Denoiser:
    """Deterministically initialize a denoiser from a seed."""
    return Denoiser(config=config, params=_init_params(config, init_seed))


def sinusoid_features(values, dim: int) -> np.ndarray:
    """Sin/cos features of a (batch of) log-SNR value(s)."""
    vals = np.atleast_1d(np.asarray(values, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(math.log(0.02), math.log(2.0), half))
    phase = vals[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1).astype(np.float32)


def _network_inputs(cfg: DenoiserConfig, z: np.ndarray, log_snr,
                    cond: ConditioningBundle, mask: FrameMask) -> dict:
    batch, frames, height, width, _ = z.shape
    emb = sinusoid_features(np.broadcast_to(np.asarray(log_snr, dtype=np.float64),
                                            (batch,)), cfg.cond_dim)
    if cond.aug_log_snr is not None:
        aug = np.broadcast_to(np.asarray(cond.aug_log_snr, dtype=np.float64), (batch,))
        emb = emb + sinusoid_features(aug, cfg.cond_dim)
    gate = (~mask.independent).astype(np.float32).reshape(batch, 1, 1, 1, 1)
    inputs = {
        "z": z,
        "emb": emb,
        "pooled": cond.pooled,
        "tgate": gate,
    }
    if cfg.cond_channels:
        inputs["cond_video"] = cond.cond_video
    if cfg.text_cond:
        inputs["tokens"] = cond.token_embeddings
        text_bias = np.where(cond.text_mask, 0.0, -1e9).astype(np.float32)  # (B, T)
        sizes = {(height // (1 << i)) * (width // (1 << i)) for i in range(cfg.levels)
                 if cfg.spatial_attention[i]}
        for hw in sizes:
            bias = np.zeros((batch, 1, 1, hw + cfg.max_tokens), dtype=np.float32)
            bias[:, 0, 0, hw:] = text_bias
            inputs[f"text_bias_{hw}"] = np.repeat(bias, frames, axis=0)
    return inputs


def _check_call_shapes(cfg: DenoiserConfig, z: np.ndarray, cond: ConditioningBundle):
    batch, frames, height, width, c = z.shape
    if c != 3:
        raise GraphError(f"denoiser expects 3 data channels, got {c}")
    if (height, width) != (cfg.height, cfg.width) and any(cfg.spatial_attention):
        raise GraphError(
            f"input {height}x{width} differs from config {cfg.height}x{cfg.width}; "
            "only fully-convolutional configs (no spatial attention) generalize"
        )
    factor = 1 << (cfg.levels - 1)
    if height % factor or width % factor:
        raise GraphError(f"input {height}x{width} must divide by {factor}")
    if (cond.cond_video is not None) != (cfg.stage_kind != StageKind.BASE):
        raise GraphError("conditioning video is required exactly for super-resolution stages")
    if cond.cond_video is not None and cond.cond_video.shape != (
        batch, frames, height, width, cfg.cond_channels
    ):
        raise GraphError(
            f"conditioning video shape {cond.cond_video.shape} does not match "
            f"input {(batch, frames, height, width, cfg.cond_channels)}"
        )
    if cond.batch != batch:
        raise GraphError(f"conditioning batch {cond.batch} != input batch {batch}")


def denoise(d: Denoiser, z_t: Tensor, log_snr, cond: ConditioningBundle,
            mask: FrameMask | None = None) -> Tensor:
    """Predict the velocity target for noisy input z_t at the given log-SNR."""
    squeeze = z_t.ndim == 4
    z = z_t.data[None] if squeeze else z_t.data
    if z.ndim != 5:
        raise GraphError(f"denoise expects a 4-D or 5-D tensor, got shape {z_t.shape}")
    if mask is None:
        mask = FrameMask.video(z.shape[0], z.shape[1])
    cfg = d.config
    _check_call_shapes(cfg, z, cond)
    graph = denoiser_graph(cfg, *z.shape[:4])
    inputs = _network_inputs(cfg, z, log_snr, cond, mask)
    out = eval_graph(graph, inputs, d.params)["v_out"]
    return Tensor(out.data[0], _trusted=True) if squeeze else out


# ---------------------------------------------------------------------------
# Image packing for joint training
# ---------------------------------------------------------------------------

def pack_image_batch(images: list[Tensor], frames: int) -> tuple[Tensor, FrameMask]:
    """Pack independent images into video-shaped batches, one image per slot."""
    if not images:
        raise TensorError("no images to pack")
    shape = images[0].shape
    if len(shape) != 3:
        raise TensorError(f"images must be (H, W, C), got {shape}")
    for img in images:
        if img.shape != shape:
            raise TensorError(f"image shape mismatch: {img.shape} vs {shape}")
    batch = math.ceil(len(images) / frames)
    out = np.zeros((batch, frames, *shape), dtype=np.float32)
    valid = np.zeros((batch, frames), dtype=bool)
    for i, img in enumerate(images):
        out[i // frames, i % frames] = img.data
        valid[i // frames, i % frames] = True
    return Tensor(out, _trusted=True), FrameMask(valid, np.ones(batch, dtype=bool))


def unpack_image_batch(batch: Tensor, mask: FrameMask) -> list[Tensor]:
    images = []
    for b in range(batch.shape[0]):
        for f in range(batch.shape[1]):
            if mask.valid[b, f]:
                images.append(Tensor(batch.data[b, f], _trusted=True))
    return images
