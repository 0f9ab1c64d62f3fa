import json

import numpy as np
import pytest

from slimbrain import pipeline as pl
from slimbrain.config import ConfigError, load_config
from slimbrain.hiera_jepa import TokenCounter, count_tokens
from slimbrain.volume import Volume4D

TINY = ["global.steps=20", "hiera.steps=10"]


@pytest.fixture(scope="module")
def cfg():
    return load_config("tiny", TINY)


@pytest.fixture(scope="module")
def data(cfg):
    items = pl.synthetic_dataset(cfg)
    return [v for v, _ in items], [t["label"] for _, t in items]


@pytest.fixture(scope="module")
def trained(cfg, data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    gpath, _ = pl.run_pretrain_global(cfg, data[0], out)
    jpath, _ = pl.run_pretrain_jepa(cfg, data[0], gpath, out)
    return out, gpath, jpath


def _lines(path):
    return [json.loads(x) for x in path.read_text().splitlines()]


def test_dataset_round_trip(cfg, tmp_path):
    items = pl.synthetic_dataset(cfg, n=3)
    pl.write_dataset(tmp_path, items, {"seed": 0})
    vols, labels = pl.read_dataset(tmp_path)
    assert labels == [t["label"] for _, t in items]
    assert all(a.data.tobytes() == b.data.tobytes() for a, (b, _) in zip(vols, items))
    assert sorted(set(labels)) == [0, 1]


def test_metrics_schema_and_determinism(cfg, data, trained, tmp_path):
    out, _, _ = trained
    rows = _lines(out / "metrics_global.jsonl")
    assert len(rows) == cfg.global_.steps
    assert set(rows[0]) == {"step", "phase", "loss", "lr", "tokens_sparse", "tokens_dense", "wall_ms"}
    assert rows[0]["wall_ms"] is None and rows[0]["phase"] == "global"
    jrows = _lines(out / "metrics_jepa.jsonl")
    assert all(r["tokens_sparse"] <= r["tokens_dense"] for r in jrows)
    gpath, _ = pl.run_pretrain_global(cfg, data[0], tmp_path)
    pl.run_pretrain_jepa(cfg, data[0], gpath, tmp_path)
    for name in ("metrics_global.jsonl", "metrics_jepa.jsonl", "global.slck", "jepa.slck"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name


def test_resume_continues_the_same_trajectory(data, tmp_path):
    full_cfg = load_config("tiny", ["global.steps=12"])
    half_cfg = load_config("tiny", ["global.steps=6"])
    _, full = pl.run_pretrain_global(full_cfg, data[0][:4], tmp_path / "full")
    first, a = pl.run_pretrain_global(half_cfg, data[0][:4], tmp_path / "half")
    _, b = pl.run_pretrain_global(full_cfg, data[0][:4], tmp_path / "half", resume=first)
    assert a + b == full
    assert (tmp_path / "half/metrics_global.jsonl").read_bytes() == (tmp_path / "full/metrics_global.jsonl").read_bytes()


def test_resume_refuses_mismatched_config(cfg, data, trained, tmp_path):
    _, gpath, _ = trained
    other = load_config("tiny", TINY + ["global.lr=0.01"])
    with pytest.raises(pl.ConfigMismatchError, match="--force"):
        pl.run_pretrain_global(other, data[0][:2], tmp_path, resume=gpath)
    pl.run_pretrain_global(other, data[0][:2], tmp_path, resume=gpath, force=True)


def test_missing_global_checkpoint(cfg, data, tmp_path):
    with pytest.raises(FileNotFoundError):
        pl.run_pretrain_jepa(cfg, data[0], tmp_path / "nope.slck", tmp_path)


def test_selection_strategy_changes_the_trace(data, tmp_path, trained):
    _, gpath, _ = trained
    traces = {}
    for strategy in ("topk", "random"):
        c = load_config("tiny", TINY + [f"selector.strategy={json.dumps(strategy)}"])
        pl.run_pretrain_jepa(c, data[0], gpath, tmp_path / strategy)
        traces[strategy] = (tmp_path / strategy / "metrics_jepa.jsonl").read_text()
    assert traces["topk"] != traces["random"]


def test_window_budget_larger_than_clip_is_rejected():
    with pytest.raises(ConfigError):
        load_config("tiny", ["selector.k=9"])  # 9 * 5 > 40


def test_features_are_deterministic_and_sized(cfg, data, trained):
    _, gpath, jpath = trained
    g, _ = pl.load_global(gpath)
    st, _ = pl.load_encoder(jpath)
    v = data[0][0]
    a = pl.extract_features(cfg, g, st, v, seed=1)
    b = pl.extract_features(cfg, g, st, v, seed=1)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (cfg.hiera.stages[-1].width,)
    counter = TokenCounter()
    pl.extract_features(cfg, g, st, v, seed=1, counter=counter)
    assert counter.materialized == count_tokens(pl.grid_of(v, cfg), cfg.selector.k * cfg.global_.window // cfg.hiera.frames_per_token).sparse


def test_background_perturbation_never_changes_descriptors(cfg, data, trained):
    _, gpath, jpath = trained
    g, _ = pl.load_global(gpath)
    st, _ = pl.load_encoder(jpath)
    v = data[0][1]
    noisy = v.data.copy()
    noisy[~v.mask] = np.random.default_rng(0).normal(scale=50.0, size=noisy[~v.mask].shape)
    w = Volume4D(noisy, v.mask)
    for strategy in ("topk", "variance", "uniform"):
        a = pl.extract_features(cfg, g, st, v, strategy, seed=2)
        b = pl.extract_features(cfg, g, st, w, strategy, seed=2)
        assert a.tobytes() == b.tobytes(), strategy


def test_linear_probe_leaves_backbone_bytes(cfg, data, trained):
    _, gpath, jpath = trained
    g, _ = pl.load_global(gpath)
    st, _ = pl.load_encoder(jpath)
    before = (g.fingerprint(), st.student.fingerprint(), st.teacher.fingerprint(), st.predictor.fingerprint())
    res = pl.run_probe(cfg, g, st, *data, mode="linear")
    assert (g.fingerprint(), st.student.fingerprint(), st.teacher.fingerprint(), st.predictor.fingerprint()) == before
    assert set(res) == {"mode", "acc", "f1", "mse", "seed", "config_hash"}
    assert 0.0 <= res["acc"] <= 1.0


def test_finetune_updates_student_only(data, trained):
    _, gpath, jpath = trained
    c = load_config("tiny", TINY + ["probe.finetune_steps=3"])
    g, _ = pl.load_global(gpath)
    st, _ = pl.load_encoder(jpath)
    teacher, student = st.teacher.fingerprint(), st.student.fingerprint()
    pl.run_probe(c, g, st, *data, mode="finetune")
    assert st.teacher.fingerprint() == teacher and st.student.fingerprint() != student


def test_probe_on_separable_descriptors(cfg, data, trained):
    _, gpath, jpath = trained
    g, _ = pl.load_global(gpath)
    st, _ = pl.load_encoder(jpath)
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 20)
    feats = rng.normal(size=(40, 6)) + 4.0 * y[:, None]
    res = pl.run_probe(cfg, g, st, [None] * 40, y, features=feats)
    assert res["acc"] >= 0.95
    reg = load_config("tiny", TINY + ['probe.task="regression"', "probe.steps=800"])
    target = feats[:, 0]
    res = pl.run_probe(reg, g, st, [None] * 40, target, features=feats)
    assert res["mse"] < 1e-2 * target.var()


def test_single_class_probe_raises(cfg, trained):
    _, gpath, jpath = trained
    g, _ = pl.load_global(gpath)
    st, _ = pl.load_encoder(jpath)
    with pytest.raises(ValueError, match="two classes"):
        pl.run_probe(cfg, g, st, [None] * 4, [1, 1, 1, 1], features=np.zeros((4, 3)))


def test_split_is_stratified_and_deterministic():
    y = np.array([0] * 6 + [1] * 4)
    a = pl.split_indices(10, 0.5, 3, y)
    b = pl.split_indices(10, 0.5, 3, y)
    assert all(np.array_equal(x, z) for x, z in zip(a, b))
    train, test = a
    assert sorted(np.concatenate([train, test]).tolist()) == list(range(10))
    assert (y[train] == 0).sum() == 3 and (y[train] == 1).sum() == 2
