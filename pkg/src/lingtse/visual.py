"""Visual cue streams and the three impairment scenarios.

Streams are frame-level embeddings (not pixels). The synthetic cue carries the
target's log-energy envelope through a seeded fixed linear map, so a separator
can actually exploit it. Impairments affect one seeded contiguous block of
round(ratio * T) frames; unaffected frames are left bit-identical.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .audio import AudioClip

FULL_MISSING = "full_missing"
PARTIAL_OCCLUSION = "partial_occlusion"
LOW_RESOLUTION = "low_resolution"

BLUR_WINDOW = 5          # frames, centered moving average
NOISE_SCALE = 0.5        # fraction of the stream's per-coordinate std


@dataclasses.dataclass
class ImpairmentSpec:
    kind: str
    ratio: float
    seed: int = 0
    low_res_mode: str = "blur"  # blur | noise

    def __post_init__(self):
        if self.kind not in (FULL_MISSING, PARTIAL_OCCLUSION, LOW_RESOLUTION):
            raise ValueError(f"unknown impairment kind: {self.kind}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must be in [0, 1], got {self.ratio}")
        if self.low_res_mode not in ("blur", "noise"):
            raise ValueError(f"unknown low_res_mode: {self.low_res_mode}")


@dataclasses.dataclass
class VisualStream:
    frames: np.ndarray  # (T, D)
    fps: float = 25.0
    impairment: ImpairmentSpec | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a (T, D) matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames must be finite")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def derive_synthetic_visual(
    target: AudioClip, dim: int, fps: float = 25.0, seed: int = 0
) -> VisualStream:
    """Stand-in for a lip-embedding frontend.

    Computes the per-video-frame log-energy envelope of the target audio and
    expands it through a seeded fixed affine map with a tanh squash. Silent
    audio yields a constant embedding.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    n_frames = int(round(target.duration_s * fps))
    n_frames = max(n_frames, 1)
    hop = target.sample_rate / fps
    env = np.empty(n_frames)
    for t in range(n_frames):
        a = int(round(t * hop))
        b = min(int(round((t + 1) * hop)), len(target.samples))
        seg = target.samples[a:b] if b > a else target.samples[-1:]
        env[t] = np.log10(np.mean(seg ** 2) + 1e-10)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(dim)
    b = rng.standard_normal(dim)
    frames = np.tanh(np.outer(env, w) + b)
    return VisualStream(frames, fps=fps)


def sample_impairment_ratio(rng: np.random.Generator) -> float:
    """One per-utterance impairment ratio, uniform in [0, 1]."""
    return float(rng.uniform(0.0, 1.0))


def apply_impairment(v: VisualStream, spec: ImpairmentSpec) -> VisualStream:
    """Corrupt exactly round(ratio * T) contiguous frames per the spec kind."""
    t_v, d_v = v.frames.shape
    n = int(round(spec.ratio * t_v))
    out = v.frames.copy()
    rng = np.random.default_rng(spec.seed)
    start = int(rng.integers(0, t_v - n + 1)) if n < t_v else 0
    if n > 0:
        block = slice(start, start + n)
        if spec.kind == FULL_MISSING:
            out[block] = 0.0
        elif spec.kind == PARTIAL_OCCLUSION:
            n_cov = int(np.ceil(d_v / 2))
            coords = rng.choice(d_v, size=n_cov, replace=False)
            obstacle = rng.standard_normal(n_cov)
            out[block, coords] = obstacle
        elif spec.kind == LOW_RESOLUTION and spec.low_res_mode == "blur":
            half = BLUR_WINDOW // 2
            for t in range(start, start + n):
                a = max(0, t - half)
                b = min(t_v, t + half + 1)
                out[t] = v.frames[a:b].mean(axis=0)
        else:  # low_resolution / noise
            sigma = v.frames.std(axis=0)
            noise = rng.standard_normal((n, d_v)) * (NOISE_SCALE * sigma)
            out[block] = v.frames[block] + noise
    return VisualStream(out, fps=v.fps, impairment=spec)


def write_visual(path, stream: VisualStream) -> None:
    """Flat little-endian float32 binary plus a JSON sidecar."""
    path = Path(path)
    stream.frames.astype("<f4").tofile(path)
    sidecar = {
        "T_v": stream.num_frames,
        "D_v": stream.dim,
        "fps": stream.fps,
        "impairment": None
        if stream.impairment is None
        else dataclasses.asdict(stream.impairment),
    }
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(sidecar, f, sort_keys=True)


def read_visual(path) -> VisualStream:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as f:
        sidecar = json.load(f)
    frames = np.fromfile(path, dtype="<f4").reshape(
        sidecar["T_v"], sidecar["D_v"]
    )
    imp = sidecar.get("impairment")
    spec = ImpairmentSpec(**imp) if imp else None
    return VisualStream(frames.astype(np.float64), fps=sidecar["fps"], impairment=spec)
