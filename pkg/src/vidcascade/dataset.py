"""Deterministic synthetic video corpus with a mechanically checkable grammar.

Each clip shows one colored shape on a plain background following one of six
motions; the prompt string determines the scene exactly and vice versa. The
finite grammar (3 shapes x 4 colors x 6 motions x 2 backgrounds = 144
prompts) keeps text conditioning learnable by the toy embedder, and the
rule-based classifier below recovers (shape, color, motion) from pixels so
text-video alignment can be scored without any pretrained network.

Clip files are little-endian float32 payloads behind an `IVCLIP` header;
datasets regenerate bit-exactly from their manifest.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .tensor import Tensor, TensorError

SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
}
MOTIONS = ("left", "right", "up", "down", "grow", "rotate")
BACKGROUNDS = {"black": (-1.0, -1.0, -1.0), "white": (1.0, 1.0, 1.0)}

_MOTION_PHRASE = {
    "left": "moving left",
    "right": "moving right",
    "up": "moving up",
    "down": "moving down",
    "grow": "growing",
    "rotate": "rotating",
}
_PHRASE_MOTION = {v: k for k, v in _MOTION_PHRASE.items()}

CLIP_MAGIC = b"IVCLIP"
CLIP_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class SceneParams:
    shape: str
    color: str
    motion: str
    background: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise TensorError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise TensorError(f"unknown color {self.color!r}")
        if self.motion not in MOTIONS:
            raise TensorError(f"unknown motion {self.motion!r}")
        if self.background not in BACKGROUNDS:
            raise TensorError(f"unknown background {self.background!r}")


def prompt_for(params: SceneParams) -> str:
    return (
        f"a {params.color} {params.shape} {_MOTION_PHRASE[params.motion]} "
        f"on {params.background}"
    )


def params_from_prompt(prompt: str) -> SceneParams:
    words = prompt.split()
    if len(words) < 6 or words[0] != "a" or words[-2] != "on":
        raise TensorError(f"prompt {prompt!r} does not match the scene grammar")
    phrase = " ".join(words[3:-2])
    if phrase not in _PHRASE_MOTION:
        raise TensorError(f"prompt {prompt!r} has no recognizable motion phrase")
    return SceneParams(
        shape=words[2], color=words[1], motion=_PHRASE_MOTION[phrase], background=words[-1]
    )


def all_scene_params() -> list[SceneParams]:
    """The full grammar in a fixed deterministic order."""
    return [
        SceneParams(shape=s, color=c, motion=m, background=b)
        for s in SHAPES for c in COLORS for m in MOTIONS for b in BACKGROUNDS
    ]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_SUPER = 4  # subpixel sampling factor for antialiasing


def _coverage(shape: str, cx: float, cy: float, r: float, h: int, w: int) -> np.ndarray:
    """Fraction of each pixel covered by the shape (unit scene coordinates)."""
    ys = (np.arange(h * _SUPER) + 0.5) / (h * _SUPER)
    xs = (np.arange(w * _SUPER) + 0.5) / (w * _SUPER)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    dx = xx - cx
    dy = yy - cy
    if shape == "square":
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif shape == "circle":
        inside = dx * dx + dy * dy <= r * r
    else:  # upward-pointing triangle: apex at cy - r, base at cy + r
        half_base = 1.2 * r
        inside = (dy >= -r) & (dy <= r) & (np.abs(dx) <= half_base * (dy + r) / (2 * r))
    cov = inside.reshape(h, _SUPER, w, _SUPER).mean(axis=(1, 3))
    return cov.astype(np.float32)


def _trajectory(motion: str, progress: float) -> tuple[float, float, float]:
    """(cx, cy, r) of the shape at a given motion progress in [0, 1]."""
    if motion == "left":
        return 0.68 - 0.36 * progress, 0.5, 0.20
    if motion == "right":
        return 0.32 + 0.36 * progress, 0.5, 0.20
    if motion == "up":
        return 0.5, 0.68 - 0.36 * progress, 0.20
    if motion == "down":
        return 0.5, 0.32 + 0.36 * progress, 0.20
    if motion == "grow":
        return 0.5, 0.5, 0.12 + 0.18 * progress
    # rotate: the centroid orbits the scene center through 3/4 of a turn
    angle = 1.5 * math.pi * progress
    return 0.5 + 0.24 * math.cos(angle), 0.5 + 0.24 * math.sin(angle), 0.14


def render_clip(params: SceneParams, frames: int, h: int, w: int) -> Tensor:
    """Antialiased rasterization of the moving shape; values in [-1, 1]."""
    if h < 8 or w < 8:
        raise TensorError(f"render size must be at least 8x8, got {h}x{w}")
    if frames < 1:
        raise TensorError("need at least one frame")
    bg = np.array(BACKGROUNDS[params.background], dtype=np.float32)
    fg = np.array(COLORS[params.color], dtype=np.float32)
    out = np.empty((frames, h, w, 3), dtype=np.float32)
    for f in range(frames):
        progress = f / (frames - 1) if frames > 1 else 0.5
        cx, cy, r = _trajectory(params.motion, progress)
        cov = _coverage(params.shape, cx, cy, r, h, w)[..., None]
        out[f] = bg + cov * (fg - bg)
    return Tensor(out, _trusted=True)


# ---------------------------------------------------------------------------
# Rule-based alignment classifier
# ---------------------------------------------------------------------------

def classify_clip(video: Tensor) -> SceneParams:
    """Recover (shape, color, motion, background) from pixels.

    Centroid-path tracking decides the motion, foreground color statistics
    decide the color, and the shape is the candidate whose re-rendered
    silhouette correlates best with the observed coverage. Exact on clean
    renders at any supported resolution, and tolerant of sampler noise.
    """
    arr = video.data.astype(np.float64)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise TensorError(f"classifier expects (F,H,W,3), got {video.shape}")
    f, h, w, _ = arr.shape

    corners = np.stack([arr[:, 0, 0], arr[:, 0, -1], arr[:, -1, 0], arr[:, -1, -1]])
    bg_name = min(BACKGROUNDS, key=lambda n: float(
        np.abs(np.median(corners, axis=(0, 1)) - np.array(BACKGROUNDS[n])).mean()
    ))
    bg = np.array(BACKGROUNDS[bg_name])

    # First pass: rough coverage from color distance to the background just
    # to vote on the foreground color.
    dist = np.abs(arr - bg).mean(axis=-1)  # (F, H, W)
    interior = max(float(np.percentile(dist, 99.0)), 1e-6)
    rough = np.clip(dist / interior, 0.0, 1.0)
    rough = np.where(rough > 0.25, rough, 0.0)
    if rough.any():
        fg_rgb = (arr * rough[..., None]).sum(axis=(0, 1, 2)) / rough.sum()
    else:
        fg_rgb = arr.mean(axis=(0, 1, 2))
    color_name = min(COLORS, key=lambda n: float(((fg_rgb - np.array(COLORS[n])) ** 2).sum()))

    # Second pass: per-pixel coverage as the projection onto the
    # background-to-color axis. Exact on clean renders (pixels are
    # bg + coverage * (fg - bg)) and it discards noise orthogonal to the axis.
    axis = np.array(COLORS[color_name]) - bg
    proj = ((arr - bg) @ axis) / float(axis @ axis)
    cov = np.clip(proj, 0.0, 1.0)
    cov = np.where(cov > 0.25, cov, 0.0)

    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    areas = np.maximum(cov.sum(axis=(1, 2)), 1e-9)
    cy = (cov.sum(axis=2) @ ys) / areas
    cx = (cov.sum(axis=1) @ xs) / areas

    motion = _classify_motion(cx, cy, areas, h, w)
    shape = _classify_shape(cov, areas, cx, cy, h, w)
    return SceneParams(shape=shape, color=color_name, motion=motion, background=bg_name)


def _classify_motion(cx, cy, areas, h, w) -> str:
    f = len(areas)
    span = max(1, f // 4)
    head, tail = slice(0, span), slice(f - span, f)
    growth = float(areas[tail].mean() / max(areas[head].mean(), 1e-9))
    dx = float(cx[tail].mean() - cx[head].mean()) / w
    dy = float(cy[tail].mean() - cy[head].mean()) / h
    disp = math.hypot(dx, dy)
    if growth > 1.8 and disp < 0.15:
        return "grow"

    # Max perpendicular deviation of the centroid path from its chord: zero
    # for straight-line motions, large for the orbiting one.
    p = np.stack([cx / w, cy / h], axis=1)
    chord = p[-1] - p[0]
    norm = float(np.linalg.norm(chord))
    rel = p - p[0]
    if norm > 1e-6:
        perp = np.abs(chord[0] * rel[:, 1] - chord[1] * rel[:, 0]) / norm
    else:
        perp = np.linalg.norm(rel, axis=1)
    if float(perp.max()) > 0.08:
        return "rotate"

    if abs(dx) >= abs(dy):
        return "right" if dx > 0 else "left"
    return "down" if dy > 0 else "up"


def _classify_shape(cov, areas, cx, cy, h, w) -> str:
    # Re-render each candidate silhouette at the measured centroid with the
    # size implied by the measured mass, and pick the best-correlated one.
    f = int(np.argmax(areas))
    observed = cov[f]
    mass = float(areas[f])
    ucx, ucy = float(cx[f]) / w, float(cy[f]) / h
    best, best_score = "circle", -1.0
    for shape in SHAPES:
        if shape == "square":
            r = math.sqrt(mass) / 2.0
        elif shape == "circle":
            r = math.sqrt(mass / math.pi)
        else:
            r = math.sqrt(mass / 2.4)
            ucy_shape = ucy - (r / h) / 3.0  # mass centroid sits below center
        center_y = ucy if shape != "triangle" else ucy_shape
        template = _coverage(shape, ucx, center_y, r / h, h, w).astype(np.float64)
        denom = math.sqrt(float((observed**2).sum()) * float((template**2).sum()))
        score = float((observed * template).sum()) / denom if denom > 0 else 0.0
        if score > best_score:
            best, best_score = shape, score
    return best


# ---------------------------------------------------------------------------
# Clip files and dataset manifest
# ---------------------------------------------------------------------------

def save_clip(path: Path | str, video: Tensor) -> None:
    arr = video.data
    if arr.ndim != 4:
        raise TensorError(f"clip files hold (F,H,W,C) video, got shape {video.shape}")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<5I", CLIP_VERSION, *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def load_clip(path: Path | str) -> Tensor:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(CLIP_MAGIC)] != CLIP_MAGIC:
        raise TensorError(f"{path}: not a clip file (bad magic)")
    version, f, h, w, c = struct.unpack_from("<5I", raw, len(CLIP_MAGIC))
    if version != CLIP_VERSION:
        raise TensorError(f"{path}: unsupported clip version {version}")
    offset = len(CLIP_MAGIC) + 20
    count = f * h * w * c
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if data.size != count:
        raise TensorError(f"{path}: truncated payload")
    return Tensor(data.reshape(f, h, w, c).astype(np.float32), _trusted=True)


@dataclass(frozen=True)
class ClipRecord:
    id: str
    prompt: str
    seed: int


@dataclass(frozen=True)
class DatasetManifest:
    format_version: int
    count: int
    frames: int
    height: int
    width: int
    clips: tuple[ClipRecord, ...]

    def params(self) -> list[SceneParams]:
        return [params_from_prompt(c.prompt) for c in self.clips]


def _sample_grammar(n: int, rng: np.random.Generator) -> list[SceneParams]:
    """Uniform draws from the grammar, cycling without replacement.

    Each full cycle is a fresh shuffle of all 144 scenes, so n == 144 covers
    the grammar exactly once while every prompt stays equally likely.
    """
    grammar = all_scene_params()
    out: list[SceneParams] = []
    while len(out) < n:
        idx = rng.permutation(len(grammar))
        out.extend(grammar[i] for i in idx[: n - len(out)])
    return out


def gen_dataset(n: int, frames: int, h: int, w: int, seed: int, out_dir: Path | str) -> DatasetManifest:
    """Render n clips and write them plus a manifest under out_dir."""
    if n < 1:
        raise TensorError("dataset needs at least one clip")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TensorError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    rng = np.random.default_rng(seed)
    records = []
    for i, params in enumerate(_sample_grammar(n, rng)):
        clip_id = f"clip_{i:04d}"
        clip_seed = int(rng.integers(0, 2**31 - 1))
        video = render_clip(params, frames, h, w)
        try:
            save_clip(out_dir / f"{clip_id}.ivc", video)
        except OSError as exc:
            raise TensorError(f"failed writing {out_dir / (clip_id + '.ivc')}: {exc}") from exc
        records.append(ClipRecord(id=clip_id, prompt=prompt_for(params), seed=clip_seed))
    manifest = DatasetManifest(
        format_version=1, count=n, frames=frames, height=h, width=w, clips=tuple(records)
    )
    (out_dir / MANIFEST_NAME).write_text(manifest_to_json(manifest))
    return manifest


def manifest_to_json(manifest: DatasetManifest) -> str:
    doc = asdict(manifest)
    doc["clips"] = [asdict(c) for c in manifest.clips]
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    doc = json.loads(path.read_text())
    return DatasetManifest(
        format_version=doc["format_version"],
        count=doc["count"],
        frames=doc["frames"],
        height=doc["height"],
        width=doc["width"],
        clips=tuple(ClipRecord(**c) for c in doc["clips"]),
    )


def load_dataset(root: Path | str) -> tuple[DatasetManifest, list[Tensor]]:
    root = Path(root)
    manifest = load_manifest(root)
    clips = [load_clip(root / f"{rec.id}.ivc") for rec in manifest.clips]
    return manifest, clips
