"""Command-line pipeline: simulate, impair, fit-codebook, train, eval.

Every command writes a resolved_config.json next to its outputs so a run can
be reproduced from its own directory. Exit codes: 0 success, 2 usage error,
3 data error, 4 missing knowledge backend.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import knowledge, metrics, simulate, trainer, visual
from .audio import read_wav, write_wav
from .backbone import BackboneConfig, init_params
from .knowledge import BackendMissingError, KnowledgeSourceSpec
from .losses import LossWeights

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_BACKEND = 4

_CONFIG_SECTIONS = {
    "backbone": {f.name for f in dataclasses.fields(BackboneConfig)},
    "stage": {
        "stage", "max_epochs", "patience_stop", "patience_halve", "lr",
        "batch_size", "alpha", "beta", "constraint_kind", "seed", "max_steps",
    },
    "knowledge": {f.name for f in dataclasses.fields(KnowledgeSourceSpec)},
    "data": {"train_manifest", "val_manifest"},
}
_CONFIG_SCALARS = {"codebook", "out_dir"}


def load_run_config(path) -> dict:
    """Load a hierarchical JSON config, rejecting unknown keys."""
    with open(path) as f:
        cfg = json.load(f)
    for key, value in cfg.items():
        if key in _CONFIG_SCALARS:
            continue
        if key not in _CONFIG_SECTIONS:
            raise ValueError(f"unknown config key: {key!r}")
        unknown = set(value) - _CONFIG_SECTIONS[key]
        if unknown:
            raise ValueError(
                f"unknown keys in config section {key!r}: {sorted(unknown)}"
            )
    return cfg


def _write_resolved_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


# -- commands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.count < 1:
        raise ValueError("--count must be >= 1")
    if not args.synthetic:
        raise ValueError("only --synthetic catalogs are supported")
    out = Path(args.out)
    catalog = simulate.make_synthetic_catalog(
        n_speakers=args.speakers,
        clips_per_speaker=args.clips_per_speaker,
        duration_s=max(args.duration + 1.0, 2.0),
        seed=args.seed,
    )
    manifest = simulate.build_manifest(
        catalog, args.count, args.duration, (args.snr_min, args.snr_max),
        global_seed=args.seed,
    )
    simulate.write_dataset(manifest, catalog, out, visual_dim=args.visual_dim)
    _write_resolved_config(out, {
        "command": "simulate",
        "count": args.count,
        "duration": args.duration,
        "seed": args.seed,
        "snr_min": args.snr_min,
        "snr_max": args.snr_max,
        "speakers": args.speakers,
        "clips_per_speaker": args.clips_per_speaker,
        "visual_dim": args.visual_dim,
        "synthetic": True,
    })
    print(f"wrote {args.count} mixtures to {out}")
    return 0


def cmd_impair(args) -> int:
    entries = simulate.load_manifest(args.manifest)
    root = Path(args.manifest).parent
    out = Path(args.out)
    (out / "visual").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    out_manifest = out / "manifest.jsonl"
    with open(out_manifest, "w") as f:
        for entry in entries:
            ratio = (
                visual.sample_impairment_ratio(rng)
                if args.ratio_uniform else args.ratio
            )
            spec = visual.ImpairmentSpec(
                kind=args.kind, ratio=ratio, seed=args.seed,
                low_res_mode=args.low_res_mode,
            )
            stream = visual.read_visual(root / entry["visual_ref"])
            impaired = visual.apply_impairment(stream, spec)
            name = Path(entry["visual_ref"]).name
            visual.write_visual(out / "visual" / name, impaired)
            rec = dict(entry)
            rec["visual_ref"] = f"visual/{name}"
            rec["impairment"] = dataclasses.asdict(spec)
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_resolved_config(out, {
        "command": "impair", "kind": args.kind, "ratio": args.ratio,
        "ratio_uniform": args.ratio_uniform, "seed": args.seed,
        "low_res_mode": args.low_res_mode, "manifest": str(args.manifest),
    })
    print(f"wrote impaired visual streams to {out}")
    return 0


def cmd_fit_codebook(args) -> int:
    entries = simulate.load_manifest(args.manifest)
    root = Path(args.manifest).parent
    spec = KnowledgeSourceSpec(
        kind=args.source, feature_dim=args.feature_dim, seed=args.seed
    )
    feats = [
        knowledge.pslm_features(read_wav(root / e["target_path"]), spec)
        for e in entries
    ]
    cb = knowledge.fit_codebook(feats, k=args.k, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    knowledge.write_codebook(out, cb, spec, seed=args.seed)
    _write_resolved_config(out.parent, {
        "command": "fit_codebook", "manifest": str(args.manifest),
        "source": args.source, "k": args.k, "seed": args.seed,
        "feature_dim": args.feature_dim, "out": str(out),
    })
    print(f"wrote {args.k}-centroid codebook to {out}")
    return 0


def _stage_config_from(cfg_section: dict, args) -> trainer.StageConfig:
    section = dict(cfg_section)
    if args.stage is not None:
        section["stage"] = args.stage
    if args.constraint is not None:
        section["constraint_kind"] = args.constraint
    if "stage" not in section:
        raise ValueError("training stage not given (config or --stage)")
    alpha = section.pop("alpha", 1.0)
    beta = section.pop("beta", 10.0)
    return trainer.StageConfig(weights=LossWeights(alpha, beta), **section)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config) if args.config else {}
    stage_cfg = _stage_config_from(cfg.get("stage", {}), args)
    if stage_cfg.stage == 2 and not args.resume:
        raise ValueError("--stage 2 requires --resume with a prior checkpoint")
    out = Path(args.out or cfg.get("out_dir", "run"))
    out.mkdir(parents=True, exist_ok=True)

    backbone_cfg = BackboneConfig(**cfg.get("backbone", {}))
    if args.resume:
        model, _, _ = trainer.load_checkpoint(args.resume)
    else:
        model = init_params(backbone_cfg)

    data_cfg = cfg.get("data", {})
    train_manifest = args.train_manifest or data_cfg.get("train_manifest")
    val_manifest = args.val_manifest or data_cfg.get("val_manifest")
    if not train_manifest or not val_manifest:
        raise ValueError("train and validation manifests are required")
    train_data = trainer.LoadedDataset(
        simulate.load_manifest(train_manifest), Path(train_manifest).parent
    )
    val_data = trainer.LoadedDataset(
        simulate.load_manifest(val_manifest), Path(val_manifest).parent
    )

    know = None
    codebook = None
    adapters = None
    if stage_cfg.constraint_kind != "none":
        know = KnowledgeSourceSpec(**cfg.get("knowledge", {"kind": "synthetic"}))
        if stage_cfg.constraint_kind == "pslm_ce":
            cb_path = args.codebook or cfg.get("codebook")
            if not cb_path:
                raise ValueError("pslm_ce training needs --codebook")
            codebook = knowledge.read_codebook(cb_path)
        if stage_cfg.constraint_kind == "plm_mse":
            adapters = knowledge.AdapterPair(
                speech_dim=know.feature_dim, text_dim=know.feature_dim,
                seed=stage_cfg.seed,
            )

    model, state, _history = trainer.train_stage(
        model, train_data, val_data, stage_cfg,
        knowledge=know, codebook=codebook, adapters=adapters,
        history_path=out / "history.jsonl",
        from_checkpoint=bool(args.resume),
    )
    # inference checkpoint: backbone only, no adapter tensors
    trainer.save_checkpoint(out / "checkpoint.ltse", model, state)
    _write_resolved_config(out, {
        "command": "train",
        "backbone": dataclasses.asdict(model.cfg),
        "stage": {**dataclasses.asdict(stage_cfg.weights),
                  **{k: v for k, v in dataclasses.asdict(stage_cfg).items()
                     if k != "weights"}},
        "knowledge": None if know is None else dataclasses.asdict(know),
        "data": {"train_manifest": str(train_manifest),
                 "val_manifest": str(val_manifest)},
        "resume": args.resume,
    })
    print(f"best validation SI-SDR {state.best_val_sisdr:.2f} dB "
          f"after {state.epoch} epochs; checkpoint at {out / 'checkpoint.ltse'}")
    return 0


def cmd_eval(args) -> int:
    entries = simulate.load_manifest(args.manifest)
    root = Path(args.manifest).parent
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source = KnowledgeSourceSpec(
        kind="synthetic", feature_dim=args.feature_dim, seed=args.seed
    )
    if args.estimates:
        est_dir = Path(args.estimates)
    else:
        est_dir = out / "estimates"
        est_dir.mkdir(exist_ok=True)
        if args.oracle:
            for e in entries:
                write_wav(est_dir / f"{e['id']}.wav",
                          read_wav(root / e["target_path"]))
        else:
            if not args.checkpoint:
                raise ValueError("eval needs a checkpoint (or --oracle)")
            model, _, _ = trainer.load_checkpoint(args.checkpoint)
            from .backbone import extract

            for e in entries:
                mix = read_wav(root / e["mixture_path"])
                stream = visual.read_visual(root / e["visual_ref"])
                est = extract(mix, stream, model)
                write_wav(est_dir / f"{e['id']}.wav", est)
    result = metrics.evaluate_manifest(entries, root, est_dir, out, source)
    _write_resolved_config(out, {
        "command": "eval", "manifest": str(args.manifest),
        "checkpoint": args.checkpoint, "oracle": args.oracle,
        "estimates": args.estimates, "seed": args.seed,
        "feature_dim": args.feature_dim,
    })
    agg = result["aggregate"]
    print("  ".join(f"{c}={agg[f]:.3f}" for c, f in
                    zip(metrics.CSV_COLUMNS, metrics.REPORT_FIELDS)))
    return 0


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lingtse",
        description="Target speaker extraction pipelines with linguistic "
                    "constraint training.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate two-speaker mixtures")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--duration", type=float, default=4.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--synthetic", action="store_true",
                   help="use the built-in synthetic speech catalog")
    s.add_argument("--snr-min", type=float, default=-10.0)
    s.add_argument("--snr-max", type=float, default=10.0)
    s.add_argument("--speakers", type=int, default=8)
    s.add_argument("--clips-per-speaker", type=int, default=3)
    s.add_argument("--visual-dim", type=int, default=64)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("impair", help="apply visual cue impairments")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", required=True,
                   choices=[visual.FULL_MISSING, visual.PARTIAL_OCCLUSION,
                            visual.LOW_RESOLUTION])
    s.add_argument("--ratio", type=float, default=None)
    s.add_argument("--ratio-uniform", action="store_true")
    s.add_argument("--low-res-mode", choices=["blur", "noise"], default="blur")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_impair)

    s = sub.add_parser("fit-codebook", help="k-means codebook over features")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--source", default="synthetic",
                   choices=["synthetic", "pslm"])
    s.add_argument("--k", type=int, default=500)
    s.add_argument("--feature-dim", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fit_codebook)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--config", default=None)
    s.add_argument("--stage", type=int, choices=[1, 2], default=None)
    s.add_argument("--constraint", default=None,
                   choices=list(trainer.CONSTRAINT_KINDS))
    s.add_argument("--resume", default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--train-manifest", default=None)
    s.add_argument("--val-manifest", default=None)
    s.add_argument("--codebook", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score estimates against a manifest")
    s.add_argument("manifest")
    s.add_argument("checkpoint", nargs="?", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--estimates", default=None,
                   help="directory of precomputed {id}.wav estimates")
    s.add_argument("--oracle", action="store_true",
                   help="score the references against themselves")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--feature-dim", type=int, default=64)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "impair" and args.ratio is None and not args.ratio_uniform:
        print("error: one of --ratio or --ratio-uniform is required",
              file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except BackendMissingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
