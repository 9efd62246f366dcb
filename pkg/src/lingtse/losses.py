"""Training objectives: SI-SDR reconstruction plus linguistic constraints.

The combined objective is total = alpha * l_sisdr + beta * l_lc with defaults
alpha=1, beta=10. All functions take torch tensors and stay differentiable;
batch inputs are reduced by the mean so the weights mean the same thing at any
batch size.
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn.functional as F

from .knowledge import AdapterPair

# relative stabilization of the SI-SDR power ratio; caps the value at
# +/- 80 dB so identical or orthogonal signals stay finite
SISDR_EPS = 1e-8


@dataclasses.dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 10.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclasses.dataclass
class LossReport:
    l_sisdr: float
    l_lc: float
    total: float
    constraint_kind: str  # none | pslm_mse | pslm_ce | plm_mse


def si_sdr_db(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Scale-invariant SDR in dB; supports (T,) or (B, T), mean over batch.

    The projection target s = (<est, ref>/||ref||^2) ref; the power ratio
    ||s||^2/||est - s||^2 is stabilized on both sides with a relative epsilon
    so the result is capped near +/- 80 dB and stays scale invariant.
    """
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    if est.dim() == 1:
        est = est.unsqueeze(0)
        ref = ref.unsqueeze(0)
    ref_pow = (ref * ref).sum(-1)
    if torch.any(ref_pow == 0):
        raise ValueError("reference signal is all-zero")
    dot = (est * ref).sum(-1)
    s = (dot / ref_pow).unsqueeze(-1) * ref
    e = est - s
    num = (s * s).sum(-1)
    den = (e * e).sum(-1)
    ratio = (num + SISDR_EPS * den) / (den + SISDR_EPS * num)
    return (10.0 * torch.log10(ratio)).mean()


def si_sdr_loss(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Negated SI-SDR, the stage-1 training objective."""
    return -si_sdr_db(est, ref)


def lc_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and target feature sequences."""
    if pred.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    return F.mse_loss(pred, target)


def lc_ce(logits: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of token logits (T, K) against target tokens (T,)."""
    if logits.dim() != 2 or tokens.dim() != 1 or logits.shape[0] != tokens.shape[0]:
        raise ValueError("logits must be (T, K) and tokens (T,)")
    if tokens.numel() and (tokens.min() < 0 or tokens.max() >= logits.shape[1]):
        raise ValueError("token index out of range")
    return F.cross_entropy(logits, tokens)


def lc_plm(
    pred_features: torch.Tensor,
    plm_vec: torch.Tensor,
    adapters: AdapterPair,
) -> torch.Tensor:
    """MSE between adapter projections of pooled speech features and the
    transcript embedding."""
    speech_proj = adapters.speech(pred_features.mean(dim=0))
    text_proj = adapters.text(plm_vec)
    if speech_proj.shape != text_proj.shape:
        raise ValueError("adapter projection dimensions differ")
    return F.mse_loss(speech_proj, text_proj)


def total_loss(
    est: torch.Tensor,
    ref: torch.Tensor,
    weights: LossWeights,
    constraint_kind: str = "none",
    l_lc: torch.Tensor | None = None,
) -> tuple[torch.Tensor, LossReport]:
    """Combine the reconstruction loss with an already-computed constraint
    term; returns the differentiable scalar and a float report."""
    if constraint_kind not in ("none", "pslm_mse", "pslm_ce", "plm_mse"):
        raise ValueError(f"unknown constraint kind: {constraint_kind}")
    l_rec = si_sdr_loss(est, ref)
    if constraint_kind == "none":
        if l_lc is not None:
            raise ValueError("constraint term given but constraint_kind is none")
        l_lc = torch.zeros((), dtype=l_rec.dtype)
    elif l_lc is None:
        raise ValueError(f"constraint_kind {constraint_kind} needs a constraint term")
    total = weights.alpha * l_rec + weights.beta * l_lc
    report = LossReport(
        l_sisdr=float(l_rec.detach()),
        l_lc=float(l_lc.detach()),
        total=float(total.detach()),
        constraint_kind=constraint_kind,
    )
    return total, report
