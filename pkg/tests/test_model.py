"""End-to-end forward pass and the three ablation variants."""
from dataclasses import replace

import numpy as np
import pytest

from affectfuse.config import MODALITIES
from affectfuse.model import Model, forward, init_params
from affectfuse.tensor import DimensionError
from affectfuse.theory import toy_batch, toy_model_config

CFG = toy_model_config(False)


def batch(T=5, n=3, seed=0):
    X, _ = toy_batch(CFG, n_sessions=n, T=T, seed=seed)
    return X


@pytest.mark.parametrize("variant", ["full", "no_cmaa", "no_mie", "no_tfl"])
def test_outputs_on_simplex(variant):
    cfg = replace(CFG, variant=variant)
    out = forward(init_params(cfg, 0), cfg, batch())
    assert out.y.shape == (3, 5, 4) and out.weights.shape == (3, 5, 3)
    assert np.all(out.y.data >= 0) and np.max(np.abs(out.y.data.sum(-1) - 1)) < 1e-9
    assert np.max(np.abs(out.weights.data.sum(-1) - 1)) < 1e-9


def test_no_mie_weights_equal():
    cfg = replace(CFG, variant="no_mie")
    np.testing.assert_array_equal(forward(init_params(cfg, 0), cfg, batch()).weights.data, 1 / 3)


def test_no_cmaa_passes_encodings_through():
    cfg = replace(CFG, variant="no_cmaa")
    out = forward(init_params(cfg, 0), cfg, batch())
    for m in MODALITIES:
        assert out.g[m] is out.h[m]


def test_model_is_causal():
    model = Model.initialize(CFG, 0)
    X = batch(T=6)
    Y = {m: x.copy() for m, x in X.items()}
    Y["visual"][:, 4:] += 10.0
    np.testing.assert_array_equal(model.predict_proba(X)[:, :4], model.predict_proba(Y)[:, :4])


def test_batched_equals_single():
    model = Model.initialize(CFG, 0)
    X = batch()
    full = model.predict_proba(X)
    single = model.predict_proba({m: x[1] for m, x in X.items()})
    np.testing.assert_allclose(full[1], single, atol=1e-12)


def test_initialization_deterministic_and_seeded():
    a, b, c = init_params(CFG, 3).named(), init_params(CFG, 3).named(), init_params(CFG, 4).named()
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)


def test_modality_encoders_are_distinct():
    p = init_params(CFG, 0).named()
    assert "encoders.audio.projection.weight" in p
    assert p["encoders.audio.blocks.0.q.weight"].data.tobytes() != p["encoders.text.blocks.0.q.weight"].data.tobytes()


def test_wrong_raw_width():
    X = batch()
    X["text"] = X["text"][..., :-1]
    with pytest.raises(DimensionError):
        Model.initialize(CFG, 0).predict_proba(X)


def test_fully_missing_modality_is_finite():
    X = batch()
    X["audio"][:] = 0.0
    assert np.all(np.isfinite(Model.initialize(CFG, 0).predict_proba(X)))


def test_identical_modalities_symmetric_weights():
    cfg = replace(CFG, dim_audio=5, dim_visual=5, dim_text=5)
    params = init_params(cfg, 0)
    enc = params.encoders
    enc["visual"] = enc["audio"]
    enc["text"] = enc["audio"]
    pairs = params.cmaa
    for key in pairs:
        pairs[key] = pairs["audio_visual"]
    x = np.random.default_rng(0).normal(size=(4, 5))
    w = forward(params, cfg, {m: x for m in MODALITIES}).weights.data
    np.testing.assert_allclose(w, 1 / 3, atol=1e-15)
