"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Errors are written to stderr as one JSON line ``{"error": ..., "detail": ...}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pipeline as pl
from .checkpoint import Checkpoint, load_checkpoint
from .config import ConfigError, PipelineConfig, load_config
from .hiera_jepa import build_unit_grid, count_tokens
from .selector import score_mutual, select_topk
from .volume import Volume4D, load_volume, pad_volume, patchify_spatial, read_header, sphere_mask


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config, args.overrides)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _emit(text: str, out: str | None):
    if out is None:
        sys.stdout.write(text)
    else:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def _dataset(args, cfg: PipelineConfig) -> tuple[list[Volume4D], list]:
    if args.data is not None:
        return pl.read_dataset(args.data)
    items = pl.synthetic_dataset(cfg)
    return [v for v, _ in items], [t["label"] for _, t in items]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _config(args)
    items = pl.synthetic_dataset(cfg)
    path = pl.write_dataset(args.out, items, {"seed": cfg.seed, "config_hash": cfg.hash(), "profile": cfg.profile})
    print(json.dumps({"manifest": str(path), "n_volumes": len(items)}))
    return 0


def cmd_pretrain_global(args) -> int:
    cfg = _config(args)
    vols, _ = _dataset(args, cfg)
    path, losses = pl.run_pretrain_global(cfg, vols, args.out, resume=args.resume, force=args.force)
    print(json.dumps({"checkpoint": str(path), "steps": len(losses), "final_loss": losses[-1] if losses else None}))
    return 0


def cmd_score(args) -> int:
    model, cfg = pl.load_global(args.ckpt)
    k = args.k if args.k is not None else cfg.selector.k
    series = pl.series_of(load_volume(args.volume), cfg)
    scores = score_mutual(model, series, cfg.global_.window)
    chosen = set(select_topk(scores, k, cfg.global_.window, series.n_frames).windows.tolist())
    rows = [{"m": m, "s_m": float(s), "selected": m in chosen} for m, s in enumerate(scores.scores)]
    _emit(_jsonl(rows), args.out)
    return 0


def cmd_pretrain_jepa(args) -> int:
    cfg = _config(args)
    vols, _ = _dataset(args, cfg)
    path, losses = pl.run_pretrain_jepa(cfg, vols, args.global_ckpt, args.out, resume=args.resume, force=args.force)
    print(json.dumps({"checkpoint": str(path), "steps": len(losses), "final_loss": losses[-1] if losses else None}))
    return 0


def _models(args):
    gmodel, _ = pl.load_global(args.global_ckpt)
    state, cfg = pl.load_encoder(args.ckpt)
    if args.strategy is not None:
        cfg.selector.strategy = args.strategy
    if args.seed is not None:
        cfg.seed = args.seed
    return gmodel, state, cfg


def cmd_features(args) -> int:
    gmodel, state, cfg = _models(args)
    if args.volume is not None:
        names, vols = [args.volume], [load_volume(args.volume)]
    else:
        vols, _ = pl.read_dataset(args.data)
        names = [f"{i}" for i in range(len(vols))]
    rows = []
    for i, (name, v) in enumerate(zip(names, vols)):
        g = pl.extract_features(cfg, gmodel, state, v, seed=np.random.default_rng([cfg.seed, 4, i]))
        rows.append({"volume": name, "descriptor": [float(x) for x in g]})
    _emit(_jsonl(rows), args.out)
    return 0


def cmd_probe(args) -> int:
    gmodel, state, cfg = _models(args)
    vols, labels = pl.read_dataset(args.data)
    if any(y is None for y in labels):
        raise ValueError("manifest entries need labels for probing")
    report = pl.run_probe(cfg, gmodel, state, vols, labels, mode=args.mode)
    _emit(json.dumps(report, sort_keys=True) + "\n", args.out)
    return 0


def budget_report(cfg: PipelineConfig, mask_kind: str = "sphere") -> dict:
    """Token accounting for the configured geometry without building any model."""
    dims = tuple(cfg.data.dims)
    mask = sphere_mask(dims, cfg.data.radius) if mask_kind == "sphere" else np.ones(dims, dtype=bool)
    vol = Volume4D(np.zeros(dims + (1,), dtype=np.float32), mask)
    pgrid = patchify_spatial(pad_volume(vol, cfg.global_.patch), cfg.global_.patch)
    h = cfg.hiera
    ugrid = build_unit_grid(pad_volume(vol, h.unit).mask, h.unit, h.merge, h.frames_per_token)
    n_slots = -(-cfg.clip_frames // h.frames_per_token)
    full = count_tokens(ugrid, n_slots)
    n_context = int(round(h.context_ratio * ugrid.n_units * n_slots))
    return {
        "mask": mask_kind,
        "global": {
            "candidate_patches": pgrid.n_candidates,
            "foreground_patches": pgrid.n_foreground,
            "windows": cfg.n_windows,
            "tokens_dense": pgrid.n_candidates * cfg.n_windows,
            "tokens_sparse": pgrid.n_foreground * cfg.n_windows,
            "ratio": pgrid.n_foreground / pgrid.n_candidates,
        },
        "hiera": {
            "candidate_units": ugrid.n_candidates,
            "foreground_units": ugrid.n_units,
            "slots": n_slots,
            "tokens_per_cell": ugrid.tokens_per_cell,
            **full.as_dict(),
            "context_tokens": n_context * ugrid.tokens_per_cell,
        },
    }


def cmd_budget(args) -> int:
    print(json.dumps(budget_report(_config(args), args.mask), sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    with open(args.path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"SL4D":
        h, w, d, t = read_header(args.path)
        v = load_volume(args.path, frames=(0, min(1, t)))
        info = {"format": "SL4D", "dims": [h, w, d], "frames": t, "foreground_voxels": int(v.mask.sum())}
    elif magic == b"SLCK":
        ck: Checkpoint = load_checkpoint(args.path)
        info = {
            "format": "SLCK",
            "config_hash": ck.config_hash,
            "profile": ck.config.get("profile"),
            "sections": {
                name: {"arrays": len(arrs), "parameters": int(sum(a.size for a in arrs.values()))}
                for name, arrs in ck.sections.items()
            },
        }
    else:
        raise ValueError(f"{args.path}: unrecognised magic {magic!r}")
    print(json.dumps(info, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, out_required: bool = False, out_help: str = "output directory"):
    p.add_argument("--config", default="desk", help="profile name (desk, paper-full, tiny) or JSON config path")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, e.g. selector.k=8; repeatable")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=out_required, default=None, help=out_help)


def _resume(p: argparse.ArgumentParser):
    p.add_argument("--data", default=None, help="dataset directory or manifest (default: synthesize from config)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--force", action="store_true", help="resume even if the config hash differs")


def _inference(p: argparse.ArgumentParser):
    p.add_argument("--global-ckpt", required=True, help="global model checkpoint")
    p.add_argument("--ckpt", required=True, help="encoder checkpoint")
    p.add_argument("--strategy", choices=["topk", "variance", "uniform", "random"], default=None,
                   help="window selection strategy (default: from the checkpoint config)")
    p.add_argument("--seed", type=int, default=None, help="seed for random selection and the probe split")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slimbrain", description="Sparse atlas-free 4D fMRI encoder pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a planted-burst synthetic dataset")
    _common(p, out_required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain-global", help="train the global masked reconstruction model")
    _common(p, out_required=True)
    _resume(p)
    p.set_defaults(func=cmd_pretrain_global)

    p = sub.add_parser("score", help="score the windows of one volume")
    p.add_argument("--ckpt", required=True, help="global model checkpoint")
    p.add_argument("--volume", required=True, help="SL4D volume")
    p.add_argument("--k", type=int, default=None, help="windows to mark as selected (default: config k)")
    p.add_argument("--out", default=None, help="output JSONL file (default: stdout)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("pretrain-jepa", help="train the voxel encoder on selected windows")
    _common(p, out_required=True)
    _resume(p)
    p.add_argument("--global-ckpt", required=True, help="frozen global model checkpoint")
    p.set_defaults(func=cmd_pretrain_jepa)

    p = sub.add_parser("features", help="extract pooled descriptors")
    _inference(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--volume", default=None, help="single SL4D volume")
    src.add_argument("--data", default=None, help="dataset directory or manifest")
    p.add_argument("--out", default=None, help="output JSONL file (default: stdout)")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("probe", help="train and evaluate a probe head")
    _inference(p)
    p.add_argument("--data", required=True, help="labelled dataset directory or manifest")
    p.add_argument("--mode", choices=["linear", "finetune"], default="linear", help="freeze the encoder or fine-tune it")
    p.add_argument("--out", default=None, help="report JSON file (default: stdout)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("budget", help="print dense and sparse token counts")
    _common(p)
    p.add_argument("--mask", choices=["sphere", "full"], default="sphere", help="brain mask used for counting")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("inspect", help="summarise an SL4D volume or SLCK checkpoint")
    p.add_argument("path", help="file to inspect")
    p.set_defaults(func=cmd_inspect)
    return parser


def _fail(kind: str, detail: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "detail": detail}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        return _fail("usage", str(err), 1)
    try:
        return args.func(args)
    except ConfigError as err:
        return _fail("config", str(err), 1)
    except Exception as err:  # noqa: BLE001 - every runtime failure maps to exit code 2
        return _fail(type(err).__name__, str(err), 2)


if __name__ == "__main__":
    sys.exit(main())
