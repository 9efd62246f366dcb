"""Two-stage training loop with early stopping and learning-rate halving.

Stage 1 optimizes the reconstruction loss only; stage 2 starts from a stage-1
checkpoint and adds a linguistic constraint. One non-improvement streak drives
both schedules: the learning rate is halved when the streak reaches
patience_halve, training stops at patience_stop. Knowledge backends are never
updated; adapters are trained only in stage 2 and excluded from inference
checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch

from .audio import read_wav
from .backbone import BackboneConfig, Extractor
from .knowledge import (
    AdapterPair,
    Codebook,
    KnowledgeSourceSpec,
    plm_embedding,
    pslm_features,
    pslm_features_torch,
    token_logits_torch,
    tokenize,
)
from .losses import LossWeights, lc_ce, lc_mse, lc_plm, total_loss
from .visual import read_visual

CONSTRAINT_KINDS = ("none", "pslm_mse", "pslm_ce", "plm_mse")


@dataclasses.dataclass
class StageConfig:
    stage: int
    max_epochs: int = 100
    patience_stop: int = 6
    patience_halve: int = 3
    lr: float = 1e-3
    batch_size: int = 4
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    constraint_kind: str = "none"
    seed: int = 0
    max_steps: int | None = None
    improve_threshold_db: float = 0.01
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.constraint_kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind: {self.constraint_kind}")
        if self.stage == 1 and self.constraint_kind != "none":
            raise ValueError("stage 1 is reconstruction-only (constraint none)")
        if self.patience_halve > self.patience_stop:
            raise ValueError("patience_halve must be <= patience_stop")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("invalid optimization settings")


@dataclasses.dataclass
class TrainState:
    epoch: int = 0
    best_val_sisdr: float = -math.inf
    epochs_since_improve: int = 0
    current_lr: float = 1e-3


class LoadedDataset:
    """Manifest entries loaded into memory tensors; clips share one length."""

    def __init__(self, entries: list[dict], root, dtype=torch.float32):
        if not entries:
            raise ValueError("empty dataset split")
        root = Path(root)
        mixtures, targets, visuals = [], [], []
        self.transcripts = []
        for e in entries:
            mixtures.append(read_wav(root / e["mixture_path"]).samples)
            targets.append(read_wav(root / e["target_path"]).samples)
            visuals.append(read_visual(root / e["visual_ref"]).frames)
            self.transcripts.append(e["transcript"])
        self.mixtures = torch.tensor(np.stack(mixtures), dtype=dtype)
        self.targets = torch.tensor(np.stack(targets), dtype=dtype)
        self.visuals = torch.tensor(np.stack(visuals), dtype=dtype)

    def __len__(self):
        return self.mixtures.shape[0]


def constraint_term(
    est: torch.Tensor,
    ref: torch.Tensor,
    transcripts: list[str],
    kind: str,
    knowledge: KnowledgeSourceSpec,
    codebook: Codebook | None = None,
    adapters: AdapterPair | None = None,
) -> torch.Tensor:
    """Mean linguistic-constraint loss for a batch of estimates."""
    if kind == "pslm_mse":
        pred = pslm_features_torch(est, knowledge)
        with torch.no_grad():
            target = pslm_features_torch(ref, knowledge)
        return lc_mse(pred, target)
    if kind == "pslm_ce":
        if codebook is None:
            raise ValueError("pslm_ce needs a codebook")
        pred = pslm_features_torch(est, knowledge)
        cents = torch.as_tensor(codebook.centroids, dtype=est.dtype)
        losses = []
        for b in range(est.shape[0]):
            with torch.no_grad():
                ref_feats = pslm_features(ref[b].numpy(), knowledge)
            tokens = tokenize(ref_feats, codebook).tokens
            logits = token_logits_torch(pred[b], cents)
            losses.append(lc_ce(logits, torch.as_tensor(tokens)))
        return torch.stack(losses).mean()
    if kind == "plm_mse":
        if adapters is None:
            raise ValueError("plm_mse needs adapters")
        pred = pslm_features_torch(est, knowledge)
        losses = []
        for b in range(est.shape[0]):
            vec = torch.as_tensor(
                plm_embedding(transcripts[b], knowledge), dtype=est.dtype
            )
            losses.append(lc_plm(pred[b], vec, adapters))
        return torch.stack(losses).mean()
    raise ValueError(f"unknown constraint kind: {kind}")


def validate(model: Extractor, data: LoadedDataset) -> float:
    """Mean SI-SDR of extractions over a validation split, in dB."""
    from .losses import si_sdr_db

    if len(data) == 0:
        raise ValueError("empty validation split")
    model.eval()
    vals = []
    with torch.no_grad():
        for b in range(len(data)):
            est = model(data.mixtures[b:b + 1], data.visuals[b:b + 1])
            vals.append(
                si_sdr_db(est.double(), data.targets[b:b + 1].double()).item()
            )
    model.train()
    return float(np.mean(vals))


def train_stage(
    model: Extractor,
    train_data: LoadedDataset,
    val_data: LoadedDataset,
    cfg: StageConfig,
    knowledge: KnowledgeSourceSpec | None = None,
    codebook: Codebook | None = None,
    adapters: AdapterPair | None = None,
    history_path=None,
    from_checkpoint: bool = False,
    validate_fn=None,
):
    """Run one training stage; returns (best model, TrainState, history).

    The model argument is mutated in place and left holding the best
    (highest validation SI-SDR) parameters.
    """
    if cfg.stage == 2 and not from_checkpoint:
        raise ValueError("stage 2 requires a stage-1 (or prior) checkpoint")
    if cfg.constraint_kind != "none" and knowledge is None:
        raise ValueError("constraint training needs a knowledge source")
    if cfg.constraint_kind == "pslm_ce" and codebook is None:
        raise ValueError("pslm_ce training needs a codebook")
    if cfg.constraint_kind == "plm_mse" and adapters is None:
        raise ValueError("plm_mse training needs adapters")
    if validate_fn is None:
        validate_fn = lambda m: validate(m, val_data)  # noqa: E731

    params = list(model.parameters())
    if cfg.stage == 2 and adapters is not None:
        params = params + list(adapters.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    state = TrainState(current_lr=cfg.lr)
    best_snapshot = {k: v.detach().clone() for k, v in model.state_dict().items()}
    history = []
    steps = 0
    model.train()

    hist_file = open(history_path, "w") if history_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            perm = rng.permutation(len(train_data))
            epoch_rec, epoch_lc, epoch_total = [], [], []
            for a in range(0, len(perm), cfg.batch_size):
                idx = torch.as_tensor(perm[a:a + cfg.batch_size])
                mix = train_data.mixtures[idx]
                ref = train_data.targets[idx]
                vis = train_data.visuals[idx]
                est = model(mix, vis)
                l_lc = None
                if cfg.constraint_kind != "none":
                    l_lc = constraint_term(
                        est, ref,
                        [train_data.transcripts[i] for i in perm[a:a + cfg.batch_size]],
                        cfg.constraint_kind, knowledge, codebook, adapters,
                    )
                loss, report = total_loss(
                    est, ref, cfg.weights, cfg.constraint_kind, l_lc
                )
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                steps += 1
                epoch_rec.append(report.l_sisdr)
                epoch_lc.append(report.l_lc)
                epoch_total.append(report.total)
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break

            state.epoch = epoch
            val = float(validate_fn(model))
            if val > state.best_val_sisdr + cfg.improve_threshold_db:
                state.best_val_sisdr = val
                state.epochs_since_improve = 0
                best_snapshot = {
                    k: v.detach().clone() for k, v in model.state_dict().items()
                }
            else:
                state.epochs_since_improve += 1
                if state.epochs_since_improve == cfg.patience_halve:
                    state.current_lr /= 2.0
                    for group in opt.param_groups:
                        group["lr"] = state.current_lr

            record = {
                "epoch": epoch,
                "train_l_sisdr": float(np.mean(epoch_rec)),
                "train_l_lc": float(np.mean(epoch_lc)),
                "train_total": float(np.mean(epoch_total)),
                "val_si_sdr": val,
                "lr": state.current_lr,
                "streak": state.epochs_since_improve,
            }
            history.append(record)
            if hist_file:
                hist_file.write(json.dumps(record, sort_keys=True) + "\n")
                hist_file.flush()

            if state.epochs_since_improve >= cfg.patience_stop:
                break
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
    finally:
        if hist_file:
            hist_file.close()

    model.load_state_dict(best_snapshot)
    model.eval()
    return model, state, history


# -- checkpoint container ---------------------------------------------------

CKPT_MAGIC = b"LTSECKPT"
CKPT_VERSION = 1


def save_checkpoint(
    path,
    model: Extractor,
    state: TrainState | None = None,
    adapters: AdapterPair | None = None,
) -> None:
    """Single-file container: magic, version, JSON header, raw tensor bytes.

    Inference checkpoints are written with adapters=None and carry zero
    adapter tensors.
    """
    sections = {"backbone": model.state_dict()}
    if adapters is not None:
        sections["adapters"] = adapters.state_dict()
    index = []
    blobs = []
    offset = 0
    for section, sd in sections.items():
        for name, tensor in sd.items():
            arr = tensor.detach().cpu().numpy()
            data = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            index.append({
                "section": section,
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(data),
            })
            blobs.append(data)
            offset += len(data)
    header = {
        "config": dataclasses.asdict(model.cfg),
        "train_state": None if state is None else dataclasses.asdict(state),
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path, dtype=torch.float32):
    """Returns (model, train_state dict or None, adapter state-dict or None)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len))
        body = f.read()
    sections: dict[str, dict] = {}
    for rec in header["tensors"]:
        blob = body[rec["offset"]:rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(blob, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
        if len(blob) != rec["nbytes"]:
            raise ValueError("truncated checkpoint file")
        sections.setdefault(rec["section"], {})[rec["name"]] = torch.from_numpy(arr)
    cfg = BackboneConfig(**header["config"])
    model = Extractor(cfg, dtype=dtype)
    model.load_state_dict(
        {k: v.to(dtype) for k, v in sections["backbone"].items()}
    )
    model.eval()
    return model, header["train_state"], sections.get("adapters")
