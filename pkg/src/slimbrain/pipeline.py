"""End-to-end orchestration: global pretraining, window selection, JEPA
pretraining on selected frames, descriptor extraction and probing.

Training runs write a checkpoint plus a metrics JSONL stream, one object per
step::

    {"step", "phase", "loss", "lr", "tokens_sparse", "tokens_dense", "wall_ms"}

``wall_ms`` is ``null`` unless ``log_wall_time`` is set, which keeps metric
files byte-identical across identically seeded runs.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import PipelineConfig, from_dict, validate
from .global_mae import GlobalModel, make_optimizer, pretrain_global_step, random_clip
from .hiera_jepa import (
    Clip,
    EncoderState,
    MaskUnitGrid,
    Stage,
    TokenCounter,
    build_unit_grid,
    count_tokens,
    describe,
    encode_view,
    full_view,
    jepa_step,
    prepare_clip,
    volume_stats,
)
from .probe import ProbeClassifier, ProbeRegressor, classification_metrics, regression_metrics
from .selector import Selection, select_windows
from .volume import (
    PatchSeries,
    SyntheticSpec,
    Volume4D,
    extract_series,
    load_volume,
    make_synthetic,
    pad_volume,
    patchify_spatial,
    planted_burst_specs,
    save_volume,
)


class ConfigMismatchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


def synthetic_dataset(cfg: PipelineConfig, seed: int | None = None, n: int | None = None) -> list[tuple[Volume4D, dict]]:
    """Planted-burst volumes: labels alternate, each volume carries
    ``data.n_bursts`` class-specific bursts on whole windows."""
    d = cfg.data
    seed = cfg.seed if seed is None else seed
    base = SyntheticSpec(
        dims=tuple(d.dims), frames=d.frames, radius=d.radius, n_sources=d.n_sources, noise=d.noise,
        burst_amplitude=d.burst_amplitude, n_classes=d.n_classes,
    )
    specs = planted_burst_specs(base, d.n_volumes if n is None else n, seed, cfg.global_.window, d.n_bursts)
    return [make_synthetic(spec, int(np.random.default_rng([seed, 7, i]).integers(2**31))) for i, spec in enumerate(specs)]


MANIFEST = "manifest.json"


def write_dataset(out_dir: str | os.PathLike, items: Sequence[tuple[Volume4D, dict]], meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (v, truth) in enumerate(items):
        name = f"vol_{i:04d}.sl4d"
        save_volume(out / name, v)
        entries.append({"path": name, "label": truth.get("label"), "bursts": truth.get("bursts", [])})
    manifest = {**(meta or {}), "volumes": entries}
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(path: str | os.PathLike) -> tuple[list[Volume4D], list]:
    """Load the volumes and labels listed in a manifest (file or its directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    manifest = json.loads(path.read_text())
    vols, labels = [], []
    for entry in manifest["volumes"]:
        vols.append(load_volume(path.parent / entry["path"]))
        labels.append(entry.get("label"))
    return vols, labels


# ---------------------------------------------------------------------------
# builders


def series_of(v: Volume4D, cfg: PipelineConfig) -> PatchSeries:
    v = pad_volume(v, cfg.global_.patch)
    return extract_series(v, patchify_spatial(v, cfg.global_.patch))


def build_global(cfg: PipelineConfig) -> GlobalModel:
    g = cfg.global_
    return GlobalModel(g.window, g.width, g.depth, g.heads, seed=np.random.default_rng([cfg.seed, 11]))


def stages_of(cfg: PipelineConfig) -> list[Stage]:
    return [Stage(s.depth, s.width, s.heads, s.local) for s in cfg.hiera.stages]


def grid_of(v: Volume4D, cfg: PipelineConfig) -> MaskUnitGrid:
    h = cfg.hiera
    return build_unit_grid(pad_volume(v, h.unit), h.unit, h.merge, h.frames_per_token)


def build_encoder(cfg: PipelineConfig) -> EncoderState:
    h = cfg.hiera
    # only the token geometry of the grid matters to the encoder
    proto = MaskUnitGrid(h.unit, h.merge, h.frames_per_token, (1, 1, 1), np.array([0]))
    return EncoderState.create(
        proto,
        stages_of(cfg),
        predictor_depth=h.predictor_depth,
        predictor_heads=h.predictor_heads,
        tau=h.ema,
        lr=h.lr,
        weight_decay=h.weight_decay,
        seed=np.random.default_rng([cfg.seed, 23]),
    )


# ---------------------------------------------------------------------------
# metrics


class MetricsWriter:
    def __init__(self, path: str | os.PathLike | None, log_wall_time: bool = False, append: bool = False):
        self._fh = open(path, "a" if append else "w") if path is not None else None
        self._wall = log_wall_time
        self.records: list[dict] = []

    def write(self, step: int, phase: str, loss: float, lr: float, sparse: int, dense: int, wall_ms: float | None):
        rec = {
            "step": int(step),
            "phase": phase,
            "loss": float(loss),
            "lr": float(lr),
            "tokens_sparse": int(sparse),
            "tokens_dense": int(dense),
            "wall_ms": round(wall_ms, 3) if (self._wall and wall_ms is not None) else None,
        }
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


StepHook = Callable[[int, float, dict], None]


# ---------------------------------------------------------------------------
# training loops


def train_global_loop(
    model: GlobalModel,
    opt: nx.AdamW,
    series: Sequence[PatchSeries],
    cfg: PipelineConfig,
    start: int,
    stop: int,
    hook: StepHook | None = None,
) -> list[float]:
    g = cfg.global_
    losses = []
    n = len(series)
    for step in range(start, stop):
        rng = np.random.default_rng([cfg.seed, 1, step])
        pick = rng.choice(n, size=g.batch_size, replace=g.batch_size > n)
        batch = [random_clip(series[i], g.clip_frames, rng) for i in pick]
        t0 = time.perf_counter()
        loss = pretrain_global_step(model, batch, g.mask_ratio, rng, opt)
        losses.append(loss)
        if hook is not None:
            m = -(-batch[0].n_frames // g.window)
            hook(step, loss, {
                "sparse": sum(s.n_patches for s in batch) * m,
                "dense": sum(s.grid.n_candidates for s in batch) * m,
                "wall_ms": 1e3 * (time.perf_counter() - t0),
            })
    return losses


def select_frames(
    cfg: PipelineConfig,
    model: GlobalModel | None,
    v: Volume4D,
    strategy: str | None = None,
    seed=None,
) -> Selection:
    strategy = strategy or cfg.selector.strategy
    return select_windows(strategy, series_of(v, cfg), cfg.global_.window, cfg.selector.k, model=model, seed=seed)


@dataclass(eq=False)
class PreparedSample:
    grid: MaskUnitGrid
    clip: Clip
    selection: Selection


def prepare_sample(cfg: PipelineConfig, model: GlobalModel | None, v: Volume4D, strategy=None, seed=None) -> PreparedSample:
    sel = select_frames(cfg, model, v, strategy, seed)
    padded = pad_volume(v, cfg.hiera.unit)
    grid = build_unit_grid(padded, cfg.hiera.unit, cfg.hiera.merge, cfg.hiera.frames_per_token)
    clip = prepare_clip(padded, sel.frames, cfg.hiera.frames_per_token, stats=volume_stats(v))
    return PreparedSample(grid, clip, sel)


def train_jepa_loop(
    state: EncoderState,
    samples: Sequence[PreparedSample],
    cfg: PipelineConfig,
    start: int,
    stop: int,
    hook: StepHook | None = None,
) -> list[float]:
    h = cfg.hiera
    losses = []
    for step in range(start, stop):
        rng = np.random.default_rng([cfg.seed, 2, step])
        sample = samples[int(rng.integers(len(samples)))]
        counter = TokenCounter()
        t0 = time.perf_counter()
        loss = jepa_step(state, sample.grid, sample.clip, rng, None, h.context_ratio, h.target_ratio, counter)
        losses.append(loss)
        if hook is not None:
            dense = count_tokens(sample.grid, sample.clip.n_slots).dense
            hook(step, loss, {"sparse": counter.materialized, "dense": dense, "wall_ms": 1e3 * (time.perf_counter() - t0)})
    return losses


# ---------------------------------------------------------------------------
# checkpoint <-> models


def _prefixed(d: dict, prefix: str) -> dict:
    return {f"{prefix}{k}": v for k, v in d.items()}


def _unprefixed(d: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}


def config_of(ckpt: Checkpoint) -> PipelineConfig:
    return validate(from_dict(ckpt.config))


def load_global(source: str | os.PathLike | Checkpoint) -> tuple[GlobalModel, PipelineConfig]:
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    cfg = config_of(ckpt)
    model = build_global(cfg)
    model.load_state_dict(ckpt.section("global"))
    model.requires_grad_(False)
    return model, cfg


def load_encoder(source: str | os.PathLike | Checkpoint) -> tuple[EncoderState, PipelineConfig]:
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    cfg = config_of(ckpt)
    state = build_encoder(cfg)
    state.student.load_state_dict(ckpt.section("student"))
    state.teacher.load_state_dict(ckpt.section("teacher"))
    state.predictor.load_state_dict(ckpt.section("predictor"))
    opt = _unprefixed(ckpt.sections.get("optimizer", {}), "jepa.")
    if opt:
        state.opt.load_state_arrays(opt)
        state.step = state.opt.state.step
    return state, cfg


def _check_resume(ckpt: Checkpoint, cfg: PipelineConfig, force: bool):
    if ckpt.config_hash != cfg.hash() and not force:
        raise ConfigMismatchError(
            f"checkpoint config hash {ckpt.config_hash[:12]} does not match current config {cfg.hash()[:12]}; "
            "resume with force (--force) to override"
        )


# ---------------------------------------------------------------------------
# runs


def run_pretrain_global(
    cfg: PipelineConfig,
    dataset: Sequence[Volume4D | PatchSeries],
    out_dir: str | os.PathLike,
    resume: str | os.PathLike | None = None,
    force: bool = False,
) -> tuple[Path, list[float]]:
    """Train the global model for ``cfg.global.steps`` steps; writes
    ``global.slck`` and ``metrics_global.jsonl`` under ``out_dir``."""
    if not dataset:
        raise ValueError("empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series = [x if isinstance(x, PatchSeries) else series_of(x, cfg) for x in dataset]
    model = build_global(cfg)
    opt = make_optimizer(model, cfg.global_.lr, cfg.global_.weight_decay)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        _check_resume(ckpt, cfg, force)
        model.load_state_dict(ckpt.section("global"))
        opt.load_state_arrays(_unprefixed(ckpt.section("optimizer"), "global."))
        start = opt.state.step
    writer = MetricsWriter(out / "metrics_global.jsonl", cfg.log_wall_time, append=resume is not None)
    hook = lambda step, loss, info: writer.write(step, "global", loss, opt.state.lr, info["sparse"], info["dense"], info["wall_ms"])
    try:
        losses = train_global_loop(model, opt, series, cfg, start, cfg.global_.steps, hook)
    finally:
        writer.close()
    path = out / "global.slck"
    save_checkpoint(path, Checkpoint(cfg.hash(), cfg.to_dict(), {
        "global": model.state_dict(),
        "optimizer": _prefixed(opt.state_arrays(), "global."),
    }))
    return path, losses


def run_pretrain_jepa(
    cfg: PipelineConfig,
    dataset: Sequence[Volume4D],
    global_ckpt: str | os.PathLike | Checkpoint | GlobalModel,
    out_dir: str | os.PathLike,
    resume: str | os.PathLike | None = None,
    force: bool = False,
) -> tuple[Path, list[float]]:
    """Score and select windows with the frozen global model, then train the
    encoder on the concatenated selected frames of each sample."""
    validate(cfg)
    if not dataset:
        raise ValueError("empty dataset")
    if isinstance(global_ckpt, GlobalModel):
        gmodel = global_ckpt
    else:
        if not isinstance(global_ckpt, Checkpoint) and not Path(global_ckpt).exists():
            raise FileNotFoundError(f"global checkpoint not found: {global_ckpt}")
        gmodel, _ = load_global(global_ckpt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = [
        prepare_sample(cfg, gmodel, v, seed=np.random.default_rng([cfg.seed, 3, i]))
        for i, v in enumerate(dataset)
    ]
    state = build_encoder(cfg)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        _check_resume(ckpt, cfg, force)
        state, _ = load_encoder(ckpt)
        start = state.step
    writer = MetricsWriter(out / "metrics_jepa.jsonl", cfg.log_wall_time, append=resume is not None)
    hook = lambda step, loss, info: writer.write(step, "jepa", loss, state.opt.state.lr, info["sparse"], info["dense"], info["wall_ms"])
    try:
        losses = train_jepa_loop(state, samples, cfg, start, cfg.hiera.steps, hook)
    finally:
        writer.close()
    path = out / "jepa.slck"
    save_encoder(path, state, cfg)
    return path, losses


def save_encoder(path, state: EncoderState, cfg: PipelineConfig, heads: dict | None = None):
    sections = {
        "student": state.student.state_dict(),
        "teacher": state.teacher.state_dict(),
        "predictor": state.predictor.state_dict(),
        "optimizer": _prefixed(state.opt.state_arrays(), "jepa."),
    }
    if heads:
        sections["heads"] = heads
    save_checkpoint(path, Checkpoint(cfg.hash(), cfg.to_dict(), sections))


def extract_features(
    cfg: PipelineConfig,
    global_model: GlobalModel | None,
    state: EncoderState,
    v: Volume4D,
    strategy: str | None = None,
    seed=None,
    counter: TokenCounter | None = None,
) -> np.ndarray:
    """Select windows, encode the full foreground view of the concatenated
    frames with the student encoder and average over all output tokens."""
    sample = prepare_sample(cfg, global_model, v, strategy, seed)
    return describe(state, sample.grid, sample.clip, counter)


# ---------------------------------------------------------------------------
# probing


def split_indices(n: int, train_fraction: float, seed, labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic split; stratified over ``labels`` when given."""
    rng = np.random.default_rng(seed)
    if labels is None:
        perm = rng.permutation(n)
        k = max(1, min(n - 1, int(round(train_fraction * n))))
        return np.sort(perm[:k]), np.sort(perm[k:])
    labels = np.asarray(labels)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = max(1, min(idx.size - 1, int(round(train_fraction * idx.size)))) if idx.size > 1 else idx.size
        train.extend(idx[:k])
        test.extend(idx[k:])
    return np.sort(train), np.sort(test)


def _make_probe(cfg: PipelineConfig, seed):
    p = cfg.probe
    cls = ProbeClassifier if p.task == "classification" else ProbeRegressor
    return cls(hidden=p.hidden, lr=p.lr, weight_decay=p.weight_decay, n_steps=p.steps, random_state=seed)


def _metrics(cfg: PipelineConfig, y_true, y_pred) -> dict:
    if cfg.probe.task == "classification":
        return {**classification_metrics(y_true, y_pred), "mse": None}
    return {"acc": None, "f1": None, **regression_metrics(y_true, y_pred)}


def run_probe(
    cfg: PipelineConfig,
    global_model: GlobalModel | None,
    state: EncoderState,
    volumes: Sequence[Volume4D],
    labels: Sequence,
    mode: str = "linear",
    strategy: str | None = None,
    seed: int | None = None,
    features: np.ndarray | None = None,
) -> dict:
    """Train a probe head on a deterministic split and report held-out metrics.

    ``linear`` keeps the encoder frozen; ``finetune`` first fits the head on
    frozen features, then updates head and student encoder together.
    """
    if mode not in ("linear", "finetune"):
        raise ValueError(f"unknown probe mode {mode!r}")
    seed = cfg.seed if seed is None else seed
    y = np.asarray(labels)
    classification = cfg.probe.task == "classification"
    if classification and np.unique(y).size < 2:
        raise ValueError("probe needs at least two classes")
    train, test = split_indices(len(y), cfg.probe.train_fraction, [seed, 5], y if classification else None)
    if features is None:
        features = np.stack([
            extract_features(cfg, global_model, state, v, strategy, np.random.default_rng([seed, 4, i]))
            for i, v in enumerate(volumes)
        ])
    probe = _make_probe(cfg, seed).fit(features[train], y[train])
    if mode == "finetune":
        _finetune(cfg, global_model, state, volumes, y, train, probe, strategy, seed)
        features = np.stack([
            extract_features(cfg, global_model, state, v, strategy, np.random.default_rng([seed, 4, i]))
            for i, v in enumerate(volumes)
        ])
    return {"mode": mode, **_metrics(cfg, y[test], probe.predict(features[test])), "seed": int(seed), "config_hash": cfg.hash()}


def _finetune(cfg, global_model, state, volumes, y, train, probe, strategy, seed):
    p = cfg.probe
    samples = [prepare_sample(cfg, global_model, volumes[i], strategy, np.random.default_rng([seed, 4, int(i)])) for i in train]
    params = {f"student.{k}": v for k, v in state.student.named_parameters()}
    params.update({f"head.{k}": v for k, v in probe.head_.named_parameters()})
    opt = nx.AdamW(params, lr=p.finetune_lr, weight_decay=0.0)
    mean = nx.Tensor(probe.mean_.reshape(1, -1))
    inv = 1.0 / probe.scale_.reshape(1, -1)
    classification = isinstance(probe, ProbeClassifier)
    for step in range(p.finetune_steps):
        rng = np.random.default_rng([seed, 6, step])
        j = int(rng.integers(len(samples)))
        s = samples[j]
        opt.zero_grad()
        h = encode_view(state.student, s.grid, s.clip, full_view(s.grid, s.clip.n_slots))
        pooled = nx.mean(h, axis=0, keepdims=True)
        x = nx.mul(nx.sub(pooled, mean), nx.Tensor(inv))
        out = probe.head_(x)
        if classification:
            loss = nx.cross_entropy(out, [int(np.searchsorted(probe.classes_, y[train[j]]))])
        else:
            target = (float(y[train[j]]) - probe.y_mean_) / probe.y_scale_
            loss = nx.mse(out, nx.Tensor([[target]]))
        nx.backward(loss)
        opt.step()
