import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from slimbrain import GlobalMAE, HieraJEPA, SLIMBrainEncoder, WindowSelector
from slimbrain import pipeline as pl
from slimbrain.config import load_config


@pytest.fixture(scope="module")
def vols():
    cfg = load_config("tiny")
    return [v for v, _ in pl.synthetic_dataset(cfg, n=3)]


def test_params_round_trip_through_clone():
    for est in (GlobalMAE(width=16, heads=2), WindowSelector(k=2), HieraJEPA(unit=8, merge=2), SLIMBrainEncoder("tiny")):
        params = est.get_params()
        twin = clone(est)
        assert twin.get_params() == params and twin is not est


def test_global_mae_fit_transform(vols):
    est = GlobalMAE(patch=4, width=16, depth=1, heads=2, n_steps=3)
    with pytest.raises(NotFittedError):
        est.transform(vols)
    z = est.fit(vols).transform(vols)
    assert z.shape == (3, 16) and len(est.loss_curve_) == 3
    again = clone(est).fit(vols).transform(vols)
    assert z.tobytes() == again.tobytes()
    assert est.score_windows(vols[0]).scores.shape == (8,)


def test_window_selector(vols):
    gm = GlobalMAE(patch=4, width=16, depth=1, heads=2, n_steps=2).fit(vols)
    sel = WindowSelector(k=3, patch=4, global_mae=gm).fit()
    picks = sel.transform(vols)
    assert len(picks) == 3 and all(p.windows.size == 3 for p in picks)
    assert WindowSelector("uniform", k=2).fit().select(vols[0]).windows.tolist() == [0, 4]
    with pytest.raises(ValueError):
        WindowSelector("bogus").fit()


def test_hiera_jepa_fit_transform(vols):
    stages = [{"depth": 1, "width": 16, "heads": 2, "local": True}, {"depth": 1, "width": 16, "heads": 2, "local": False}]
    est = HieraJEPA(unit=8, merge=4, stages=stages, predictor_depth=1, predictor_heads=2, n_steps=2)
    frames = [list(range(10))] * 3
    h = est.fit(vols, frames=frames).transform(vols, frames=frames)
    assert h.shape == (3, 16) and est.n_features_out_ == 16
    with pytest.raises(ValueError):
        HieraJEPA(unit=8, merge=3).fit(vols)


def test_slimbrain_encoder_end_to_end(vols):
    est = SLIMBrainEncoder({"profile": "tiny", "global": {"steps": 2}, "hiera": {"steps": 2}}, strategy="variance")
    X = est.fit_transform(vols)
    assert X.shape == (3, est.n_features_out_)
    assert np.isfinite(X).all()
    assert [s.k for s in est.select(vols)] == [2, 2, 2]
    with pytest.raises(ValueError):
        SLIMBrainEncoder("tiny", strategy="best").fit(vols)
