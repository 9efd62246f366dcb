"""Evaluation metrics: SI-SDR(i), SDR, STOI, SpeechBERTScore.

SDR is the plain energy-ratio definition (not BSS-Eval's 512-tap projection).
STOI is the classic short-time objective intelligibility measure with the
reference constants: 10 kHz analysis rate, 25.6 ms frames at 50% overlap,
40 dB silent-frame removal, 15 one-third-octave bands from 150 Hz, 384 ms
(30-frame) segments, and a -15 dB clipping bound.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np
from scipy.signal import get_window, resample_poly

from .audio import AudioClip, read_wav
from .knowledge import KnowledgeSourceSpec, pslm_features

SISDR_EPS = 1e-8

# classic STOI constants
_STOI_FS = 10000
_STOI_FRAME = 256
_STOI_HOP = 128
_STOI_NFFT = 512
_STOI_NBANDS = 15
_STOI_MIN_FREQ = 150.0
_STOI_SEG = 30
_STOI_BETA_DB = -15.0
_STOI_DYN_RANGE_DB = 40.0


def _stabilized_ratio_db(num: float, den: float) -> float:
    ratio = (num + SISDR_EPS * den) / (den + SISDR_EPS * num)
    return 10.0 * np.log10(ratio)


def si_sdr(est: AudioClip | np.ndarray, ref: AudioClip | np.ndarray) -> float:
    """Scale-invariant SDR in dB, capped near +/- 80 dB by stabilization."""
    e = np.asarray(est.samples if isinstance(est, AudioClip) else est, float)
    r = np.asarray(ref.samples if isinstance(ref, AudioClip) else ref, float)
    if e.shape != r.shape:
        raise ValueError("est/ref length mismatch")
    ref_pow = float(r @ r)
    if ref_pow == 0.0:
        raise ValueError("reference is all-zero")
    s = (float(e @ r) / ref_pow) * r
    err = e - s
    return _stabilized_ratio_db(float(s @ s), float(err @ err))


def si_sdri(est, ref, mixture) -> float:
    """SI-SDR improvement of the estimate over the unprocessed mixture."""
    return si_sdr(est, ref) - si_sdr(mixture, ref)


def sdr(est: AudioClip | np.ndarray, ref: AudioClip | np.ndarray) -> float:
    """Plain signal-to-distortion ratio 10 log10(||ref||^2 / ||ref - est||^2)."""
    e = np.asarray(est.samples if isinstance(est, AudioClip) else est, float)
    r = np.asarray(ref.samples if isinstance(ref, AudioClip) else ref, float)
    if e.shape != r.shape:
        raise ValueError("est/ref length mismatch")
    ref_pow = float(r @ r)
    if ref_pow == 0.0:
        raise ValueError("reference is all-zero")
    diff = r - e
    return _stabilized_ratio_db(ref_pow, float(diff @ diff))


def _third_octave_matrix(fs: int, nfft: int):
    """Boolean (bands, bins) membership matrix for one-sided FFT bins."""
    freqs = np.arange(nfft // 2 + 1) * fs / nfft
    bands = np.zeros((_STOI_NBANDS, freqs.size), dtype=bool)
    for k in range(_STOI_NBANDS):
        cf = _STOI_MIN_FREQ * 2.0 ** (k / 3.0)
        lo, hi = cf / 2 ** (1 / 6), cf * 2 ** (1 / 6)
        bands[k] = (freqs >= lo) & (freqs < hi)
    return bands


def _frame(x: np.ndarray):
    n = 1 + (len(x) - _STOI_FRAME) // _STOI_HOP if len(x) >= _STOI_FRAME else 0
    idx = np.arange(_STOI_FRAME)[None, :] + _STOI_HOP * np.arange(n)[:, None]
    return x[idx]


def stoi(est: AudioClip, ref: AudioClip) -> float:
    """Classic STOI; raises on clips shorter than one analysis segment."""
    if est.sample_rate != ref.sample_rate:
        raise ValueError("sample rate mismatch")
    if len(est) != len(ref):
        raise ValueError("est/ref length mismatch")
    x = resample_poly(ref.samples, _STOI_FS, ref.sample_rate)
    y = resample_poly(est.samples, _STOI_FS, est.sample_rate)

    win = get_window("hann", _STOI_FRAME, fftbins=True)
    xf = _frame(x)
    yf = _frame(y)
    if len(xf) == 0:
        raise ValueError("clip too short for STOI analysis")
    # silent-frame removal driven by the reference energy
    energy_db = 20.0 * np.log10(np.linalg.norm(xf * win, axis=1) + 1e-20)
    keep = energy_db > energy_db.max() - _STOI_DYN_RANGE_DB
    xf, yf = xf[keep], yf[keep]
    if len(xf) < _STOI_SEG:
        raise ValueError(
            f"need at least {_STOI_SEG} non-silent frames, got {len(xf)}"
        )

    spec_x = np.abs(np.fft.rfft(xf * win, _STOI_NFFT, axis=1))
    spec_y = np.abs(np.fft.rfft(yf * win, _STOI_NFFT, axis=1))
    bands = _third_octave_matrix(_STOI_FS, _STOI_NFFT)
    bx = np.sqrt(np.einsum("tf,bf->tb", spec_x ** 2, bands.astype(float)))
    by = np.sqrt(np.einsum("tf,bf->tb", spec_y ** 2, bands.astype(float)))

    clip_bound = 10.0 ** (-_STOI_BETA_DB / 20.0)
    n = _STOI_SEG
    corrs = []
    for m in range(n, len(bx) + 1):
        xs = bx[m - n:m]  # (N, bands)
        ys = by[m - n:m]
        alpha = np.linalg.norm(xs, axis=0) / (np.linalg.norm(ys, axis=0) + 1e-20)
        ys_n = np.minimum(ys * alpha, xs * (1.0 + clip_bound))
        xc = xs - xs.mean(axis=0)
        yc = ys_n - ys_n.mean(axis=0)
        denom = np.linalg.norm(xc, axis=0) * np.linalg.norm(yc, axis=0)
        corrs.append(np.sum(xc * yc, axis=0) / (denom + 1e-20))
    return float(np.mean(corrs))


def speech_bert_score(
    est: AudioClip, ref: AudioClip, source: KnowledgeSourceSpec
) -> float:
    """F1 of greedy cosine matching between feature frames of est and ref."""
    fe = pslm_features(est, source).frames
    fr = pslm_features(ref, source).frames
    fe = fe / (np.linalg.norm(fe, axis=1, keepdims=True) + 1e-20)
    fr = fr / (np.linalg.norm(fr, axis=1, keepdims=True) + 1e-20)
    sim = fe @ fr.T  # (T_est, T_ref)
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclasses.dataclass
class MetricsReport:
    si_sdr: float
    si_sdri: float
    sdr: float
    stoi: float
    speech_bert_score: float

    def __post_init__(self):
        vals = dataclasses.astuple(self)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("metrics must be finite")


def evaluate_sample(
    est: AudioClip, ref: AudioClip, mixture: AudioClip,
    source: KnowledgeSourceSpec,
) -> MetricsReport:
    return MetricsReport(
        si_sdr=si_sdr(est, ref),
        si_sdri=si_sdri(est, ref, mixture),
        sdr=sdr(est, ref),
        stoi=stoi(est, ref),
        speech_bert_score=speech_bert_score(est, ref, source),
    )


CSV_COLUMNS = ["SI-SDR", "SI-SDRi", "SDR", "STOI", "SpeechBERTScore"]
REPORT_FIELDS = ["si_sdr", "si_sdri", "sdr", "stoi", "speech_bert_score"]


def evaluate_manifest(
    entries: list[dict],
    data_root,
    estimates_dir,
    out_dir,
    source: KnowledgeSourceSpec,
) -> dict:
    """Score every manifest entry against {estimates_dir}/{id}.wav.

    Writes report.json (per-sample + aggregate means) and report.csv with the
    standard column ordering; returns the report dict.
    """
    data_root = Path(data_root)
    estimates_dir = Path(estimates_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_sample = []
    for entry in entries:
        est_path = estimates_dir / f"{entry['id']}.wav"
        if not est_path.exists():
            raise FileNotFoundError(
                f"missing estimate for sample {entry['id']!r}: {est_path}"
            )
        est = read_wav(est_path)
        ref = read_wav(data_root / entry["target_path"])
        mixture = read_wav(data_root / entry["mixture_path"])
        report = evaluate_sample(est, ref, mixture, source)
        per_sample.append({"id": entry["id"], **dataclasses.asdict(report)})
    aggregate = {
        f: float(np.mean([s[f] for s in per_sample])) for f in REPORT_FIELDS
    }
    result = {"per_sample": per_sample, "aggregate": aggregate}
    with open(out_dir / "report.json", "w") as f:
        json.dump(result, f, indent=2, sort_keys=True)
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id"] + CSV_COLUMNS)
        for s in per_sample:
            writer.writerow([s["id"]] + [f"{s[k]:.6f}" for k in REPORT_FIELDS])
        writer.writerow(["aggregate"] + [f"{aggregate[k]:.6f}" for k in REPORT_FIELDS])
    return result
