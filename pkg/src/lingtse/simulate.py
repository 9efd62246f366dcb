"""Two-speaker mixture simulation with controlled SNR and fixed-duration clips.

Mixtures are built as ``mixture = target + gain * interferer`` where the gain
realizes the requested SNR in mean-squared-amplitude terms. The stored
interferer is the post-gain one, so the SNR of every sample can be re-measured
directly from its files. Mixtures are not renormalized after summation;
saturation only happens at WAV export.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import AudioClip, write_wav

TRAIN_RANDOM_CROP = "train_random_crop"
EVAL_HEAD_CROP = "eval_head_crop"

# vocabulary for synthetic transcripts
_SYLLABLES = [
    "ba", "de", "ki", "lo", "mu", "na", "po", "ra", "se", "ti", "vo", "zu",
    "cha", "fen", "gor", "hul", "jin", "kam", "lep", "mos",
]
_LANGUAGES = ["en", "fr", "it", "es", "pt", "de", "nl"]


def mix_at_snr(target: AudioClip, interferer: AudioClip, snr_db: float):
    """Scale the interferer and sum so the target-to-interferer SNR is snr_db.

    Returns (mixture, gain). Power is mean squared amplitude over the full
    clip.
    """
    if len(target) != len(interferer):
        raise ValueError(
            f"length mismatch: target {len(target)} vs interferer {len(interferer)}"
        )
    if target.sample_rate != interferer.sample_rate:
        raise ValueError("sample rate mismatch between target and interferer")
    p_t = target.power()
    p_i = interferer.power()
    if p_t == 0.0:
        raise ValueError("target has zero power")
    if p_i == 0.0:
        raise ValueError("interferer has zero power")
    gain = float(np.sqrt(p_t / (p_i * 10.0 ** (snr_db / 10.0))))
    mixture = AudioClip(
        target.samples + gain * interferer.samples, target.sample_rate
    )
    return mixture, gain


def clip_or_pad(clip: AudioClip, duration_s: float, mode: str, seed: int = 0) -> AudioClip:
    """Force a clip to a fixed duration.

    Shorter clips are zero-padded at the tail. Longer clips are cropped: a
    seeded uniform start offset in train mode, offset 0 in eval mode.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    if mode not in (TRAIN_RANDOM_CROP, EVAL_HEAD_CROP):
        raise ValueError(f"unknown mode: {mode}")
    n = int(round(duration_s * clip.sample_rate))
    x = clip.samples
    if len(x) < n:
        x = np.concatenate([x, np.zeros(n - len(x))])
    elif len(x) > n:
        if mode == TRAIN_RANDOM_CROP:
            rng = np.random.default_rng(seed)
            start = int(rng.integers(0, len(x) - n + 1))
        else:
            start = 0
        x = x[start:start + n]
    else:
        x = x.copy()
    return AudioClip(x, clip.sample_rate)


@dataclasses.dataclass
class CatalogEntry:
    """One source utterance: waveform plus speaker/transcript metadata."""

    clip_id: str
    speaker: str
    clip: AudioClip
    transcript: str
    language: str


def make_synthetic_catalog(
    n_speakers: int = 4,
    clips_per_speaker: int = 4,
    duration_s: float = 5.0,
    sample_rate: int = 16000,
    seed: int = 0,
) -> list[CatalogEntry]:
    """Generate speech-like clips with zero external data.

    Each speaker is a pair of seeded resonant filters excited by white noise,
    amplitude-modulated at a syllabic rate so clips have speech-like energy
    dynamics (non-silent frames, pauses).
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    catalog = []
    for s in range(n_speakers):
        # two formant-like resonators per speaker
        f1 = rng.uniform(300.0, 900.0)
        f2 = rng.uniform(1200.0, 2600.0)
        r = 0.97
        speaker = f"spk{s:03d}"
        for c in range(clips_per_speaker):
            excitation = rng.standard_normal(n)
            y = excitation
            for f0 in (f1, f2):
                w = 2.0 * np.pi * f0 / sample_rate
                a = [1.0, -2.0 * r * np.cos(w), r * r]
                y = lfilter([1.0], a, y)
            # syllabic envelope around 3-5 Hz with brief pauses
            syl = rng.uniform(3.0, 5.0)
            t = np.arange(n) / sample_rate
            phase = rng.uniform(0, 2 * np.pi)
            env = 0.5 * (1.0 + np.sin(2 * np.pi * syl * t + phase))
            env = env ** 1.5 + 0.05
            y = y * env
            y = 0.3 * y / np.max(np.abs(y))
            words = rng.choice(_SYLLABLES, size=rng.integers(4, 9))
            transcript = " ".join(words)
            language = str(rng.choice(_LANGUAGES))
            catalog.append(
                CatalogEntry(
                    clip_id=f"{speaker}_utt{c:03d}",
                    speaker=speaker,
                    clip=AudioClip(y, sample_rate),
                    transcript=transcript,
                    language=language,
                )
            )
    return catalog


@dataclasses.dataclass
class ManifestEntry:
    """Descriptor for one simulated mixture; paths are manifest-relative."""

    id: str
    target_clip_id: str
    interferer_clip_id: str
    snr_db: float
    transcript: str
    language: str
    visual_ref: str
    seed: int
    mixture_path: str
    target_path: str
    interferer_path: str


@dataclasses.dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    global_seed: int
    duration_s: float
    sample_rate: int = 16000


@dataclasses.dataclass
class MixtureSample:
    """One realized mixture with all waveforms in memory."""

    mixture: AudioClip
    target: AudioClip
    interferer: AudioClip  # stored post-gain: mixture = target + interferer
    snr_db: float
    transcript: str
    language: str
    visual_ref: str
    seed: int


def _entry_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


def build_manifest(
    catalog: list[CatalogEntry],
    count: int,
    duration_s: float,
    snr_range: tuple[float, float],
    global_seed: int,
) -> DatasetManifest:
    """Deterministically plan `count` mixtures from a catalog.

    Target and interferer speakers always differ; each entry gets an
    independent seed derived from (global_seed, index) so entries can be
    realized in any order or in parallel.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    speakers = sorted({e.speaker for e in catalog})
    if len(speakers) < 2:
        raise ValueError("catalog needs at least 2 distinct speakers")
    by_speaker = {s: [e for e in catalog if e.speaker == s] for s in speakers}
    lo, hi = snr_range
    entries = []
    for i in range(count):
        seed = _entry_seed(global_seed, i)
        rng = np.random.default_rng(seed)
        spk_t, spk_i = rng.choice(speakers, size=2, replace=False)
        tgt = by_speaker[spk_t][int(rng.integers(len(by_speaker[spk_t])))]
        itf = by_speaker[spk_i][int(rng.integers(len(by_speaker[spk_i])))]
        snr_db = float(rng.uniform(lo, hi))
        eid = f"mix{i:06d}"
        entries.append(
            ManifestEntry(
                id=eid,
                target_clip_id=tgt.clip_id,
                interferer_clip_id=itf.clip_id,
                snr_db=snr_db,
                transcript=tgt.transcript,
                language=tgt.language,
                visual_ref=f"{eid}.visual",
                seed=seed,
                mixture_path=f"audio/{eid}_mix.wav",
                target_path=f"audio/{eid}_target.wav",
                interferer_path=f"audio/{eid}_interf.wav",
            )
        )
    sr = catalog[0].clip.sample_rate
    return DatasetManifest(entries, global_seed, duration_s, sr)


def realize_entry(
    entry: ManifestEntry,
    catalog_by_id: dict[str, CatalogEntry],
    duration_s: float,
    crop_mode: str = TRAIN_RANDOM_CROP,
) -> MixtureSample:
    """Materialize one manifest entry into waveforms."""
    tgt = catalog_by_id[entry.target_clip_id].clip
    itf = catalog_by_id[entry.interferer_clip_id].clip
    seed_t = int(np.random.SeedSequence([entry.seed, 1]).generate_state(1)[0])
    seed_i = int(np.random.SeedSequence([entry.seed, 2]).generate_state(1)[0])
    tgt = clip_or_pad(tgt, duration_s, crop_mode, seed_t)
    itf = clip_or_pad(itf, duration_s, crop_mode, seed_i)
    mixture, gain = mix_at_snr(tgt, itf, entry.snr_db)
    scaled_itf = AudioClip(gain * itf.samples, itf.sample_rate)
    return MixtureSample(
        mixture=mixture,
        target=tgt,
        interferer=scaled_itf,
        snr_db=entry.snr_db,
        transcript=entry.transcript,
        language=entry.language,
        visual_ref=entry.visual_ref,
        seed=entry.seed,
    )


def write_dataset(
    manifest: DatasetManifest,
    catalog: list[CatalogEntry],
    out_dir,
    visual_dim: int = 64,
    fps: float = 25.0,
    crop_mode: str = TRAIN_RANDOM_CROP,
) -> Path:
    """Write WAVs, visual streams, and manifest.jsonl; returns manifest path."""
    from . import visual as vis

    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "visual").mkdir(parents=True, exist_ok=True)
    by_id = {e.clip_id: e for e in catalog}
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as f:
        for entry in manifest.entries:
            sample = realize_entry(entry, by_id, manifest.duration_s, crop_mode)
            write_wav(out_dir / entry.mixture_path, sample.mixture)
            write_wav(out_dir / entry.target_path, sample.target)
            write_wav(out_dir / entry.interferer_path, sample.interferer)
            stream = vis.derive_synthetic_visual(
                sample.target, dim=visual_dim, fps=fps, seed=entry.seed
            )
            vis.write_visual(out_dir / "visual" / entry.visual_ref, stream)
            rec = {
                "id": entry.id,
                "mixture_path": entry.mixture_path,
                "target_path": entry.target_path,
                "interferer_path": entry.interferer_path,
                "snr_db": entry.snr_db,
                "transcript": entry.transcript,
                "language": entry.language,
                "visual_ref": f"visual/{entry.visual_ref}",
                "seed": entry.seed,
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries
