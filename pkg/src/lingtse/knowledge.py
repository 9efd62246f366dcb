"""Linguistic knowledge sources: frame features, tokens, codebooks, adapters.

The synthetic source needs no downloads: the speech side frames the waveform
at 50 Hz and pushes it through a seeded fixed linear map with a tanh squash
(differentiable end to end); the text side hashes whitespace tokens into a
fixed vector table and mean-pools. Real backends (HuBERT/WavLM/RoBERTa
checkpoints) are optional plugins behind the same spec; when a backend id is
not registered, operations raise BackendMissingError pointing at the
synthetic fallback.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

SYNTHETIC_WINDOW = 320  # samples per feature frame at 16 kHz -> 50 Hz

BACKEND_REGISTRY_ENV = "LINGTSE_BACKEND_REGISTRY"


class BackendMissingError(RuntimeError):
    pass


@dataclasses.dataclass
class KnowledgeSourceSpec:
    kind: str  # pslm | plm | synthetic
    backend_id: str = "synthetic"
    layer_tap: int = 0
    feature_dim: int = 64
    frame_rate: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("pslm", "plm", "synthetic"):
            raise ValueError(f"unknown knowledge source kind: {self.kind}")
        if self.layer_tap < 0:
            raise ValueError("layer_tap must be >= 0")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


@dataclasses.dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, D)
    frame_rate: float = 50.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be (T, D)")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames must be finite")


@dataclasses.dataclass
class TokenSequence:
    tokens: np.ndarray  # (T,) ints in [0, K)
    num_classes: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise ValueError("tokens must be 1-D")
        if self.tokens.size and (
            self.tokens.min() < 0 or self.tokens.max() >= self.num_classes
        ):
            raise ValueError("token out of range")


@dataclasses.dataclass
class Codebook:
    centroids: np.ndarray  # (K, D)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ValueError("centroids must be (K, D) with K >= 2")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _registered_backends() -> dict:
    path = os.environ.get(BACKEND_REGISTRY_ENV)
    if not path or not Path(path).exists():
        return {}
    with open(path) as f:
        return json.load(f)


def _require_synthetic(spec: KnowledgeSourceSpec, allowed: tuple) -> None:
    if spec.kind not in allowed:
        raise ValueError(f"source kind {spec.kind!r} not valid here")
    if spec.kind != "synthetic" and spec.backend_id not in _registered_backends():
        raise BackendMissingError(
            f"backend {spec.backend_id!r} is not registered; set "
            f"{BACKEND_REGISTRY_ENV} or use a synthetic source"
        )


def _synthetic_map(spec: KnowledgeSourceSpec, dtype=torch.float64) -> tuple:
    g = torch.Generator().manual_seed(spec.seed * 1000003 + spec.layer_tap)
    w = torch.randn(SYNTHETIC_WINDOW, spec.feature_dim, generator=g, dtype=dtype)
    w = w / np.sqrt(SYNTHETIC_WINDOW)
    b = 0.1 * torch.randn(spec.feature_dim, generator=g, dtype=dtype)
    return w, b


def pslm_features_torch(wave: torch.Tensor, spec: KnowledgeSourceSpec) -> torch.Tensor:
    """Frame-level features (..., T, D) from a (..., L) waveform, differentiable."""
    _require_synthetic(spec, ("pslm", "synthetic"))
    n_frames = wave.shape[-1] // SYNTHETIC_WINDOW
    if n_frames < 1:
        raise ValueError("waveform shorter than one feature frame")
    frames = wave[..., : n_frames * SYNTHETIC_WINDOW].reshape(
        *wave.shape[:-1], n_frames, SYNTHETIC_WINDOW
    )
    w, b = _synthetic_map(spec, dtype=wave.dtype)
    return torch.tanh(frames @ w * 8.0 + b)


def pslm_features(wave, spec: KnowledgeSourceSpec) -> FeatureSequence:
    """Numpy-facing wrapper around pslm_features_torch."""
    from .audio import AudioClip

    if isinstance(wave, AudioClip):
        samples = wave.samples
    else:
        samples = np.asarray(wave, dtype=np.float64)
    feats = pslm_features_torch(torch.from_numpy(samples), spec)
    return FeatureSequence(feats.numpy(), frame_rate=spec.frame_rate)


def _token_vector(token: str, spec: KnowledgeSourceSpec) -> np.ndarray:
    digest = hashlib.sha256(
        f"{spec.seed}:{spec.layer_tap}:{token}".encode()
    ).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.standard_normal(spec.feature_dim)


def plm_embedding(transcript: str, spec: KnowledgeSourceSpec) -> np.ndarray:
    """Global transcript vector: mean pool over per-token features."""
    _require_synthetic(spec, ("plm", "synthetic"))
    tokens = transcript.split()
    if not tokens:
        raise ValueError("transcript is empty")
    vecs = np.stack([_token_vector(t, spec) for t in tokens])
    return vecs.mean(axis=0)


def fit_codebook(
    features: list[FeatureSequence],
    k: int,
    seed: int = 0,
    max_iters: int = 100,
) -> Codebook:
    """K-means with seeded k-means++ init and lowest-index tie breaking.

    The total within-cluster squared distance is checked to be non-increasing
    on every iteration.
    """
    data = np.concatenate([f.frames for f in features], axis=0)
    n = data.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} frames, got {n}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, data.shape[1]))
    centroids[0] = data[int(rng.integers(n))]
    d2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = data[int(rng.integers(n))]
        else:
            centroids[j] = data[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((data - centroids[j]) ** 2, axis=1))

    prev_obj = np.inf
    assign = None
    for _ in range(max_iters):
        dists = _sq_distances(data, centroids)
        new_assign = np.argmin(dists, axis=1)
        obj = float(dists[np.arange(n), new_assign].sum())
        if obj > prev_obj + 1e-9 * max(1.0, abs(prev_obj)):
            raise AssertionError("k-means objective increased")
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        prev_obj = obj
        for j in range(k):
            members = data[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return Codebook(centroids)


def _sq_distances(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(T, K) squared euclidean distances, chunked to bound memory."""
    t = frames.shape[0]
    out = np.empty((t, centroids.shape[0]))
    step = max(1, 2_000_000 // max(1, centroids.size))
    for a in range(0, t, step):
        diff = frames[a:a + step, None, :] - centroids[None, :, :]
        out[a:a + step] = np.sum(diff * diff, axis=2)
    return out


def tokenize(features: FeatureSequence, cb: Codebook) -> TokenSequence:
    """Nearest-centroid tokens; ties break to the lowest centroid index."""
    if features.frames.shape[1] != cb.dim:
        raise ValueError(
            f"feature dim {features.frames.shape[1]} != codebook dim {cb.dim}"
        )
    tokens = np.argmin(_sq_distances(features.frames, cb.centroids), axis=1)
    return TokenSequence(tokens, num_classes=cb.k)


def token_logits_torch(
    features: torch.Tensor, centroids: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """Logits (T, K) = -squared distance / temperature, differentiable."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    diff = features.unsqueeze(1) - centroids.unsqueeze(0)
    return -(diff * diff).sum(-1) / temperature


def token_logits(
    features: FeatureSequence, cb: Codebook, temperature: float = 1.0
) -> np.ndarray:
    if features.frames.shape[1] != cb.dim:
        raise ValueError("feature/codebook dimension mismatch")
    return token_logits_torch(
        torch.from_numpy(features.frames),
        torch.from_numpy(cb.centroids),
        temperature,
    ).numpy()


class Adapter(nn.Module):
    """Two fully connected layers with a ReLU between."""

    def __init__(self, in_dim: int, hidden_dim: int = 256, out_dim: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class AdapterPair(nn.Module):
    """Speech-side and text-side adapters projecting into a shared space."""

    def __init__(
        self,
        speech_dim: int,
        text_dim: int,
        hidden_dim: int = 256,
        proj_dim: int = 256,
        seed: int = 0,
        dtype=torch.float32,
    ):
        super().__init__()
        torch.manual_seed(seed)
        self.speech = Adapter(speech_dim, hidden_dim, proj_dim)
        self.text = Adapter(text_dim, hidden_dim, proj_dim)
        self.to(dtype)
        assert self.speech.fc2.out_features == self.text.fc2.out_features


def adapter_forward(vec: torch.Tensor, adapter: Adapter) -> torch.Tensor:
    if vec.shape[-1] != adapter.fc1.in_features:
        raise ValueError(
            f"input dim {vec.shape[-1]} != adapter in dim {adapter.fc1.in_features}"
        )
    return adapter(vec)


def write_codebook(path, cb: Codebook, spec: KnowledgeSourceSpec | None = None,
                   seed: int | None = None) -> None:
    """Binary little-endian float32 centroids plus JSON sidecar."""
    path = Path(path)
    cb.centroids.astype("<f4").tofile(path)
    sidecar = {
        "K": cb.k,
        "D": cb.dim,
        "source": None if spec is None else dataclasses.asdict(spec),
        "seed": seed,
    }
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(sidecar, f, sort_keys=True)


def read_codebook(path) -> Codebook:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as f:
        sidecar = json.load(f)
    cents = np.fromfile(path, dtype="<f4").reshape(sidecar["K"], sidecar["D"])
    return Codebook(cents.astype(np.float64))
