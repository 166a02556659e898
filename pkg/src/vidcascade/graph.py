"""Declarative compute graphs with reverse-mode gradients.

A Graph is an ordered list of named op nodes. Shapes are inferred and
validated when each node is added, so a finished graph is acyclic and
shape-consistent by construction. Evaluation walks the nodes in insertion
order; gradients walk them in reverse, accumulating vector-Jacobian products
into the parameter leaves.

Numeric discipline: tensors carry float32 semantics, but every reduction
(matmul, conv taps, attention, sums, normalization statistics) accumulates in
float64 before casting back. Besides stabilizing loss sums, this makes node
outputs invariant to how a batch is partitioned, which the frame-masking
guarantees rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class GraphError(ValueError):
    """Structured graph failure; the message names the offending node."""


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _can_broadcast(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...] | None:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        return None


def _matmul_acc(a: np.ndarray, b: np.ndarray, dtype) -> np.ndarray:
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(dtype)


# ---------------------------------------------------------------------------
# Op definitions: shape inference, forward, and VJP per op kind
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpDef:
    infer: Callable
    forward: Callable
    vjp: Callable


_OPS: dict[str, OpDef] = {}


def _op(name):
    def register(cls):
        _OPS[name] = OpDef(cls.infer, cls.forward, cls.vjp)
        return cls
    return register


@_op("add")
class _Add:
    @staticmethod
    def infer(shapes, attrs):
        out = _can_broadcast(shapes[0], shapes[1])
        if out is None:
            raise ValueError(f"add shapes {shapes[0]} and {shapes[1]} do not broadcast")
        return out

    @staticmethod
    def forward(args, attrs, dtype):
        return args[0] + args[1], None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        return _unbroadcast(g, args[0].shape), _unbroadcast(g, args[1].shape)


@_op("mul")
class _Mul:
    @staticmethod
    def infer(shapes, attrs):
        out = _can_broadcast(shapes[0], shapes[1])
        if out is None:
            raise ValueError(f"mul shapes {shapes[0]} and {shapes[1]} do not broadcast")
        return out

    @staticmethod
    def forward(args, attrs, dtype):
        return args[0] * args[1], None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        return (
            _unbroadcast(g * args[1], args[0].shape),
            _unbroadcast(g * args[0], args[1].shape),
        )


@_op("scale")
class _Scale:
    @staticmethod
    def infer(shapes, attrs):
        return shapes[0]

    @staticmethod
    def forward(args, attrs, dtype):
        return args[0] * dtype(attrs["factor"]), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        return (g * dtype(attrs["factor"]),)


@_op("silu")
class _Silu:
    @staticmethod
    def infer(shapes, attrs):
        return shapes[0]

    @staticmethod
    def forward(args, attrs, dtype):
        sig = _sigmoid(args[0])
        return args[0] * sig, sig

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        sig = ctx
        return (g * (sig * (1.0 + args[0] * (1.0 - sig))),)


@_op("matmul")
class _Matmul:
    @staticmethod
    def infer(shapes, attrs):
        a, b = shapes
        if len(b) != 2:
            raise ValueError(f"matmul rhs must be 2-D, got {b}")
        if len(a) < 1 or a[-1] != b[0]:
            raise ValueError(f"matmul inner dims differ: {a} @ {b}")
        return a[:-1] + (b[1],)

    @staticmethod
    def forward(args, attrs, dtype):
        a, b = args
        flat = a.reshape(-1, a.shape[-1])
        out = _matmul_acc(flat, b, dtype)
        return out.reshape(a.shape[:-1] + (b.shape[1],)), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        a, b = args
        gf = g.reshape(-1, g.shape[-1])
        af = a.reshape(-1, a.shape[-1])
        da = _matmul_acc(gf, b.T, dtype).reshape(a.shape)
        db = _matmul_acc(af.T, gf, dtype)
        return da, db


@_op("reshape")
class _Reshape:
    @staticmethod
    def infer(shapes, attrs):
        target = tuple(attrs["shape"])
        if int(np.prod(shapes[0])) != int(np.prod(target)):
            raise ValueError(f"reshape {shapes[0]} -> {target} changes element count")
        return target

    @staticmethod
    def forward(args, attrs, dtype):
        return args[0].reshape(tuple(attrs["shape"])), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        return (g.reshape(args[0].shape),)


@_op("concat")
class _Concat:
    @staticmethod
    def infer(shapes, attrs):
        axis = attrs["axis"]
        base = list(shapes[0])
        for s in shapes[1:]:
            if len(s) != len(base):
                raise ValueError(f"concat rank mismatch: {shapes}")
            for d in range(len(base)):
                if d != axis % len(base) and s[d] != base[d]:
                    raise ValueError(f"concat non-axis dims differ: {shapes}")
        base[axis] = sum(s[axis] for s in shapes)
        return tuple(base)

    @staticmethod
    def forward(args, attrs, dtype):
        return np.concatenate(args, axis=attrs["axis"]), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        axis = attrs["axis"]
        splits = np.cumsum([a.shape[axis] for a in args])[:-1]
        return tuple(np.split(g, splits, axis=axis))


@_op("sum")
class _Sum:
    @staticmethod
    def infer(shapes, attrs):
        return ()

    @staticmethod
    def forward(args, attrs, dtype):
        return np.asarray(args[0].sum(dtype=np.float64), dtype=dtype), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        return (np.broadcast_to(g, args[0].shape).astype(dtype, copy=True),)


@_op("pad_edge")
class _PadEdge:
    """Replicate-pad selected axes; keeps constant inputs constant."""

    @staticmethod
    def infer(shapes, attrs):
        shape = list(shapes[0])
        for axis, (before, after) in attrs["pads"]:
            shape[axis] += before + after
        return tuple(shape)

    @staticmethod
    def forward(args, attrs, dtype):
        widths = [(0, 0)] * args[0].ndim
        for axis, (before, after) in attrs["pads"]:
            widths[axis] = (before, after)
        return np.pad(args[0], widths, mode="edge"), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        for axis, (before, after) in reversed(attrs["pads"]):
            gm = np.moveaxis(g, axis, 0)
            n = gm.shape[0] - before - after
            core = gm[before:before + n].copy()
            if before:
                core[0] += gm[:before].sum(axis=0)
            if after:
                core[-1] += gm[before + n:].sum(axis=0)
            g = np.moveaxis(core, 0, axis)
        return (g,)


@_op("conv_spatial")
class _ConvSpatial:
    """Valid 2-D convolution over (H, W) of a (B,F,H,W,Cin) video.

    Weights (kh,kw,Cin,Cout) are shared across frames; pair with pad_edge for
    same-size output.
    """

    @staticmethod
    def infer(shapes, attrs):
        x, w = shapes
        if len(x) != 5 or len(w) != 4:
            raise ValueError(f"conv_spatial expects 5-D input and 4-D weight, got {x}, {w}")
        kh, kw, cin, cout = w
        if x[4] != cin:
            raise ValueError(f"conv_spatial channel mismatch: input {x[4]} vs weight {cin}")
        if x[2] < kh or x[3] < kw:
            raise ValueError(f"conv_spatial input {x} smaller than kernel {w}")
        return (x[0], x[1], x[2] - kh + 1, x[3] - kw + 1, cout)

    @staticmethod
    def forward(args, attrs, dtype):
        x, w = args
        kh, kw, cin, cout = w.shape
        ho, wo = x.shape[2] - kh + 1, x.shape[3] - kw + 1
        x64 = x.astype(np.float64)
        w64 = w.astype(np.float64)
        acc = np.zeros(x.shape[:2] + (ho, wo, cout), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                sl = x64[:, :, i:i + ho, j:j + wo, :]
                acc += (sl.reshape(-1, cin) @ w64[i, j]).reshape(acc.shape)
        return acc.astype(dtype), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        x, w = args
        kh, kw, cin, cout = w.shape
        ho, wo = g.shape[2], g.shape[3]
        g64 = g.astype(np.float64)
        x64 = x.astype(np.float64)
        w64 = w.astype(np.float64)
        gf = g64.reshape(-1, cout)
        dx = np.zeros(x.shape, dtype=np.float64)
        dw = np.zeros(w.shape, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                sl = x64[:, :, i:i + ho, j:j + wo, :]
                dw[i, j] = sl.reshape(-1, cin).T @ gf
                dx[:, :, i:i + ho, j:j + wo, :] += (gf @ w64[i, j].T).reshape(sl.shape)
        return dx.astype(dtype), dw.astype(dtype)


@_op("conv_temporal")
class _ConvTemporal:
    """Valid 1-D convolution over the frame axis of a (B,F,H,W,Cin) video."""

    @staticmethod
    def infer(shapes, attrs):
        x, w = shapes
        if len(x) != 5 or len(w) != 3:
            raise ValueError(f"conv_temporal expects 5-D input and 3-D weight, got {x}, {w}")
        kt, cin, cout = w
        if x[4] != cin:
            raise ValueError(f"conv_temporal channel mismatch: input {x[4]} vs weight {cin}")
        if x[1] < kt:
            raise ValueError(f"conv_temporal input frames {x[1]} < kernel {kt}")
        return (x[0], x[1] - kt + 1, x[2], x[3], cout)

    @staticmethod
    def forward(args, attrs, dtype):
        x, w = args
        kt, cin, cout = w.shape
        fo = x.shape[1] - kt + 1
        x64 = x.astype(np.float64)
        w64 = w.astype(np.float64)
        acc = np.zeros((x.shape[0], fo) + x.shape[2:4] + (cout,), dtype=np.float64)
        for i in range(kt):
            sl = x64[:, i:i + fo]
            acc += (sl.reshape(-1, cin) @ w64[i]).reshape(acc.shape)
        return acc.astype(dtype), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        x, w = args
        kt, cin, cout = w.shape
        fo = g.shape[1]
        g64 = g.astype(np.float64)
        x64 = x.astype(np.float64)
        w64 = w.astype(np.float64)
        gf = g64.reshape(-1, cout)
        dx = np.zeros(x.shape, dtype=np.float64)
        dw = np.zeros(w.shape, dtype=np.float64)
        for i in range(kt):
            sl = x64[:, i:i + fo]
            dw[i] = sl.reshape(-1, cin).T @ gf
            dx[:, i:i + fo] += (gf @ w64[i].T).reshape(sl.shape)
        return dx.astype(dtype), dw.astype(dtype)


@_op("groupnorm")
class _GroupNorm:
    """Normalize each (batch, frame, group) slice over its (H, W, C/G) extent.

    Statistics never cross frames, so packed single-frame images stay
    independent. Learned gain/bias live outside as broadcast mul/add.
    """

    @staticmethod
    def infer(shapes, attrs):
        x = shapes[0]
        if len(x) != 5:
            raise ValueError(f"groupnorm expects a 5-D input, got {x}")
        if x[4] % attrs["groups"] != 0:
            raise ValueError(f"groupnorm channels {x[4]} not divisible by groups {attrs['groups']}")
        return x

    @staticmethod
    def forward(args, attrs, dtype):
        x = args[0]
        b, f, h, w, c = x.shape
        groups = attrs["groups"]
        eps = attrs["eps"]
        xg = x.reshape(b, f, h, w, groups, c // groups).astype(np.float64)
        mean = xg.mean(axis=(2, 3, 5), keepdims=True)
        var = xg.var(axis=(2, 3, 5), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = ((xg - mean) * inv).astype(dtype)
        return y.reshape(x.shape), (y, inv.astype(dtype))

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        x = args[0]
        b, f, h, w, c = x.shape
        groups = attrs["groups"]
        y, inv = ctx
        gg = g.reshape(y.shape).astype(np.float64)
        y64 = y.astype(np.float64)
        mean_g = gg.mean(axis=(2, 3, 5), keepdims=True)
        mean_gy = (gg * y64).mean(axis=(2, 3, 5), keepdims=True)
        dx = (gg - mean_g - y64 * mean_gy) * inv.astype(np.float64)
        return (dx.astype(dtype).reshape(x.shape),)


@_op("attention")
class _Attention:
    """Multi-head softmax attention over token sequences (B, T, D).

    Optional fourth input is an additive score bias broadcastable to
    (B, heads, Tq, Tk); feed large negatives to mask keys.
    """

    @staticmethod
    def infer(shapes, attrs):
        q, k, v = shapes[0], shapes[1], shapes[2]
        heads = attrs["heads"]
        if len(q) != 3 or len(k) != 3 or len(v) != 3:
            raise ValueError(f"attention expects 3-D q/k/v, got {q}, {k}, {v}")
        if q[0] != k[0] or q[0] != v[0]:
            raise ValueError(f"attention batch dims differ: {q}, {k}, {v}")
        if q[2] != k[2] or k[1] != v[1]:
            raise ValueError(f"attention shapes inconsistent: {q}, {k}, {v}")
        if q[2] % heads != 0 or v[2] % heads != 0:
            raise ValueError(f"attention width {q[2]}/{v[2]} not divisible by heads {heads}")
        if len(shapes) == 4:
            bias = shapes[3]
            target = (q[0], heads, q[1], k[1])
            if _can_broadcast(bias, target) != target:
                raise ValueError(f"attention bias {bias} does not broadcast to {target}")
        return (q[0], q[1], v[2])

    @staticmethod
    def forward(args, attrs, dtype):
        q, k, v = args[0], args[1], args[2]
        heads = attrs["heads"]
        b, tq, d = q.shape
        tk = k.shape[1]
        dh = d // heads
        dv = v.shape[2] // heads
        qh = q.reshape(b, tq, heads, dh).transpose(0, 2, 1, 3).astype(np.float64)
        kh = k.reshape(b, tk, heads, dh).transpose(0, 2, 1, 3).astype(np.float64)
        vh = v.reshape(b, tk, heads, dv).transpose(0, 2, 1, 3).astype(np.float64)
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
        if len(args) == 4:
            scores = scores + args[3].astype(np.float64)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        p = e / e.sum(axis=-1, keepdims=True)
        outh = p @ vh
        out = outh.transpose(0, 2, 1, 3).reshape(b, tq, v.shape[2])
        return out.astype(dtype), (qh, kh, vh, p)

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        q, k, v = args[0], args[1], args[2]
        heads = attrs["heads"]
        qh, kh, vh, p = ctx
        b, _, tq, dh = qh.shape
        dv = vh.shape[3]
        gh = g.reshape(b, tq, heads, dv).transpose(0, 2, 1, 3).astype(np.float64)
        dv_ = p.transpose(0, 1, 3, 2) @ gh
        dp = gh @ vh.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        scale = 1.0 / np.sqrt(dh)
        dq = (ds @ kh) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ qh) * scale
        grads = [
            dq.transpose(0, 2, 1, 3).reshape(q.shape).astype(dtype),
            dk.transpose(0, 2, 1, 3).reshape(k.shape).astype(dtype),
            dv_.transpose(0, 2, 1, 3).reshape(v.shape).astype(dtype),
        ]
        if len(args) == 4:
            grads.append(_unbroadcast(ds, args[3].shape).astype(dtype))
        return tuple(grads)


@_op("avgpool_spatial")
class _AvgPool:
    @staticmethod
    def infer(shapes, attrs):
        x = shapes[0]
        if len(x) != 5 or x[2] % 2 or x[3] % 2:
            raise ValueError(f"avgpool_spatial needs a 5-D input with even H,W, got {x}")
        return (x[0], x[1], x[2] // 2, x[3] // 2, x[4])

    @staticmethod
    def forward(args, attrs, dtype):
        x = args[0]
        b, f, h, w, c = x.shape
        xr = x.reshape(b, f, h // 2, 2, w // 2, 2, c).astype(np.float64)
        return xr.mean(axis=(3, 5)).astype(dtype), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        b, f, h, w, c = args[0].shape
        gq = (g * dtype(0.25))[:, :, :, None, :, None, :]
        dx = np.broadcast_to(gq, (b, f, h // 2, 2, w // 2, 2, c))
        return (dx.reshape(args[0].shape).astype(dtype, copy=True),)


@_op("upsample_nearest")
class _UpsampleNearest:
    @staticmethod
    def infer(shapes, attrs):
        x = shapes[0]
        if len(x) != 5:
            raise ValueError(f"upsample_nearest expects 5-D input, got {x}")
        return (x[0], x[1], x[2] * 2, x[3] * 2, x[4])

    @staticmethod
    def forward(args, attrs, dtype):
        return np.repeat(np.repeat(args[0], 2, axis=2), 2, axis=3), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        b, f, h, w, c = args[0].shape
        gr = g.reshape(b, f, h, 2, w, 2, c).astype(np.float64)
        return (gr.sum(axis=(3, 5)).astype(dtype),)


@_op("spatial_tokens")
class _SpatialTokens:
    """(B,F,H,W,C) -> (B*F, H*W, C): each frame becomes a token row."""

    @staticmethod
    def infer(shapes, attrs):
        b, f, h, w, c = shapes[0]
        return (b * f, h * w, c)

    @staticmethod
    def forward(args, attrs, dtype):
        b, f, h, w, c = args[0].shape
        return args[0].reshape(b * f, h * w, c), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        return (g.reshape(args[0].shape),)


@_op("spatial_untokens")
class _SpatialUntokens:
    @staticmethod
    def infer(shapes, attrs):
        target = tuple(attrs["shape"])
        bf, hw, c = shapes[0]
        b, f, h, w, tc = target
        if bf != b * f or hw != h * w or c != tc:
            raise ValueError(f"cannot untokenize {shapes[0]} to {target}")
        return target

    @staticmethod
    def forward(args, attrs, dtype):
        return args[0].reshape(tuple(attrs["shape"])), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        return (g.reshape(args[0].shape),)


@_op("temporal_tokens")
class _TemporalTokens:
    """(B,F,H,W,C) -> (B*H*W, F, C): each pixel's frame column becomes a row."""

    @staticmethod
    def infer(shapes, attrs):
        b, f, h, w, c = shapes[0]
        return (b * h * w, f, c)

    @staticmethod
    def forward(args, attrs, dtype):
        b, f, h, w, c = args[0].shape
        return np.ascontiguousarray(args[0].transpose(0, 2, 3, 1, 4)).reshape(b * h * w, f, c), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        b, f, h, w, c = args[0].shape
        return (np.ascontiguousarray(g.reshape(b, h, w, f, c).transpose(0, 3, 1, 2, 4)),)


@_op("temporal_untokens")
class _TemporalUntokens:
    @staticmethod
    def infer(shapes, attrs):
        target = tuple(attrs["shape"])
        bhw, f, c = shapes[0]
        b, tf, h, w, tc = target
        if bhw != b * h * w or f != tf or c != tc:
            raise ValueError(f"cannot untokenize {shapes[0]} to {target}")
        return target

    @staticmethod
    def forward(args, attrs, dtype):
        b, f, h, w, c = tuple(attrs["shape"])
        return np.ascontiguousarray(args[0].reshape(b, h, w, f, c).transpose(0, 3, 1, 2, 4)), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        b, f, h, w, c = tuple(attrs["shape"])
        return (np.ascontiguousarray(g.transpose(0, 2, 3, 1, 4)).reshape(b * h * w, f, c),)


@_op("repeat_tokens")
class _RepeatTokens:
    """Tile a (B, T, C) sequence to (B*r, T, C), row-major in the batch."""

    @staticmethod
    def infer(shapes, attrs):
        b, t, c = shapes[0]
        return (b * attrs["times"], t, c)

    @staticmethod
    def forward(args, attrs, dtype):
        return np.repeat(args[0], attrs["times"], axis=0), None

    @staticmethod
    def vjp(g, args, out, ctx, attrs, dtype):
        b, t, c = args[0].shape
        return (g.reshape(b, attrs["times"], t, c).sum(axis=1, dtype=np.float64).astype(dtype),)


# ---------------------------------------------------------------------------
# Graph structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    name: str
    op: str                      # "input" | "param" | "const" | op kind
    inputs: tuple[str, ...]
    attrs: dict
    shape: tuple[int, ...]
    needs_grad: bool


@dataclass(frozen=True)
class Graph:
    nodes: tuple[Node, ...]
    by_name: dict[str, Node]
    input_names: tuple[str, ...]
    param_names: tuple[str, ...]
    output_names: tuple[str, ...]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: self.by_name[n].shape for n in self.param_names}


class GraphBuilder:
    """Incremental graph construction with per-node shape validation."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._by_name: dict[str, Node] = {}
        self._consts: dict[str, np.ndarray] = {}

    def _register(self, node: Node) -> str:
        if node.name in self._by_name:
            raise GraphError(f"duplicate node name '{node.name}'")
        self._nodes.append(node)
        self._by_name[node.name] = node
        return node.name

    def shape_of(self, name: str) -> tuple[int, ...]:
        return self._by_name[name].shape

    def input(self, name: str, shape: Sequence[int]) -> str:
        return self._register(Node(name, "input", (), {}, tuple(shape), False))

    def param(self, name: str, shape: Sequence[int]) -> str:
        return self._register(Node(name, "param", (), {}, tuple(shape), True))

    def const(self, name: str, value: np.ndarray) -> str:
        arr = np.asarray(value, dtype=np.float32)
        self._consts[name] = arr
        return self._register(Node(name, "const", (), {}, arr.shape, False))

    def op(self, kind: str, name: str, *inputs: str, **attrs) -> str:
        if kind not in _OPS:
            raise GraphError(f"unknown op kind '{kind}' at node '{name}'")
        shapes = []
        for ref in inputs:
            if ref not in self._by_name:
                raise GraphError(f"node '{name}' references undefined input '{ref}'")
            shapes.append(self._by_name[ref].shape)
        try:
            shape = _OPS[kind].infer(shapes, attrs)
        except ValueError as exc:
            raise GraphError(f"node '{name}': {exc}") from exc
        needs = any(self._by_name[r].needs_grad for r in inputs)
        return self._register(Node(name, kind, tuple(inputs), attrs, tuple(shape), needs))

    def build(self, outputs: Sequence[str]) -> Graph:
        for out in outputs:
            if out not in self._by_name:
                raise GraphError(f"undefined output node '{out}'")
        graph = Graph(
            nodes=tuple(self._nodes),
            by_name=dict(self._by_name),
            input_names=tuple(n.name for n in self._nodes if n.op == "input"),
            param_names=tuple(n.name for n in self._nodes if n.op == "param"),
            output_names=tuple(outputs),
        )
        object.__setattr__(graph, "_consts", dict(self._consts))
        return graph


def _as_array(value, dtype) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    return arr.astype(dtype, copy=False)


def _forward(graph: Graph, inputs, params, dtype, keep_ctx: bool):
    values: dict[str, np.ndarray] = {}
    ctxs: dict[str, object] = {}
    consts = getattr(graph, "_consts", {})
    for node in graph.nodes:
        if node.op == "input":
            if node.name not in inputs:
                raise GraphError(f"missing input '{node.name}'")
            arr = _as_array(inputs[node.name], dtype)
        elif node.op == "param":
            if node.name not in params:
                raise GraphError(f"missing parameter '{node.name}'")
            arr = _as_array(params[node.name], dtype)
        elif node.op == "const":
            arr = consts[node.name].astype(dtype, copy=False)
        else:
            args = [values[r] for r in node.inputs]
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                arr, ctx = _OPS[node.op].forward(args, node.attrs, dtype)
            if not np.all(np.isfinite(arr)):
                raise GraphError(f"non-finite output at node '{node.name}'")
            if keep_ctx and node.needs_grad:
                ctxs[node.name] = ctx
            values[node.name] = arr
            continue
        if arr.shape != node.shape:
            raise GraphError(
                f"node '{node.name}' expected shape {node.shape}, got {arr.shape}"
            )
        values[node.name] = arr
    return values, ctxs


def eval_graph(graph: Graph, inputs: dict, params: dict, dtype=np.float32) -> dict[str, Tensor]:
    """Run the graph forward and return its declared outputs."""
    np_dtype = np.dtype(dtype).type
    values, _ = _forward(graph, inputs, params, np_dtype, keep_ctx=False)
    return {name: Tensor(values[name].astype(np.float32, copy=False), _trusted=True)
            for name in graph.output_names}


def eval_and_grad(
    graph: Graph, inputs: dict, params: dict, dtype=np.float32
) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """Forward plus reverse-mode gradients of the scalar output w.r.t. params.

    The gradient dict always carries every parameter name; parameters the
    output does not depend on get zero gradients.
    """
    if len(graph.output_names) != 1:
        raise GraphError("eval_and_grad requires exactly one output node")
    out_name = graph.output_names[0]
    if graph.by_name[out_name].shape != ():
        raise GraphError(f"eval_and_grad output '{out_name}' must be scalar")
    np_dtype = np.dtype(dtype).type
    values, ctxs = _forward(graph, inputs, params, np_dtype, keep_ctx=True)

    grads: dict[str, np.ndarray] = {out_name: np.asarray(1.0, dtype=np_dtype)}
    for node in reversed(graph.nodes):
        if node.name not in grads or node.op in ("input", "param", "const"):
            continue
        g = grads.pop(node.name)
        args = [values[r] for r in node.inputs]
        partials = _OPS[node.op].vjp(
            g, args, values[node.name], ctxs.get(node.name), node.attrs, np_dtype
        )
        for ref, part in zip(node.inputs, partials):
            if not graph.by_name[ref].needs_grad:
                continue
            if ref in grads:
                grads[ref] = grads[ref] + part
            else:
                grads[ref] = part

    out = {out_name: Tensor(values[out_name].astype(np.float32, copy=False), _trusted=True)}
    param_grads = {}
    for name in graph.param_names:
        g = grads.get(name)
        if g is None:
            g = np.zeros(graph.by_name[name].shape, dtype=np.float32)
        param_grads[name] = Tensor(np.asarray(g, dtype=np.float32), _trusted=True)
    return out, param_grads


def finite_diff_check(graph: Graph, inputs: dict, params: dict, eps: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    Both sides evaluate in float64 so the check measures the correctness of
    the backward formulas, not float32 rounding. Intended for small graphs:
    cost is two forward passes per parameter entry.
    """
    if eps <= 0:
        raise GraphError("finite_diff_check requires eps > 0")
    if len(graph.output_names) != 1 or graph.by_name[graph.output_names[0]].shape != ():
        raise GraphError("finite_diff_check requires a single scalar output")
    out_name = graph.output_names[0]
    _, analytic = eval_and_grad(graph, inputs, params, dtype=np.float64)

    base = {k: _as_array(v, np.float64).copy() for k, v in params.items()}

    def loss_with(pdict):
        values, _ = _forward(graph, inputs, pdict, np.float64, keep_ctx=False)
        return float(values[out_name])

    worst = 0.0
    for name, arr in base.items():
        an = analytic[name].data
        flat = arr.reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + eps
            hi = loss_with(base)
            flat[idx] = keep - eps
            lo = loss_with(base)
            flat[idx] = keep
            fd = (hi - lo) / (2.0 * eps)
            a = float(an.reshape(-1)[idx])
            worst = max(worst, abs(a - fd) / (abs(a) + 1e-8))
    return worst
