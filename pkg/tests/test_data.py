"""Synthetic generator, missing-data injection and dataset files."""
import hashlib
import struct
from dataclasses import replace

import numpy as np
import pytest

from affectfuse.config import MODALITIES, ConfigError, GeneratorConfig
from affectfuse.container import FormatError
from affectfuse.data import (apply_masks, deserialize_dataset, draw_means, emit_observations, generate_dataset,
                             inject_missing, missing_masks, sample_markov_chain, serialize_dataset,
                             transition_matrix)

SMALL = GeneratorConfig(T=6, dim_audio=3, dim_visual=4, dim_text=2, n_train=5, n_val=2, n_test=3, seed=3)


@pytest.fixture(scope="module")
def default_ds():
    return generate_dataset(GeneratorConfig())


def test_identity_chain_is_constant(rng):
    s = sample_markov_chain(50, np.eye(4), rng)
    assert np.all(s == s[0])


def test_uniform_chain_frequencies():
    s = sample_markov_chain(100_001, np.full((4, 4), 0.25), np.random.default_rng(0))
    counts = np.zeros((4, 4))
    np.add.at(counts, (s[:-1], s[1:]), 1)
    freq = counts / counts.sum(1, keepdims=True)
    assert np.max(np.abs(freq - 0.25)) < 0.01


def test_default_self_transition_rate():
    s = sample_markov_chain(100_001, transition_matrix(4, 0.85), np.random.default_rng(1))
    assert abs(np.mean(s[1:] == s[:-1]) - 0.85) < 0.01


def test_chain_rejects_bad_matrix(rng):
    with pytest.raises(ValueError):
        sample_markov_chain(5, np.full((2, 2), 0.6), rng)


def test_noiseless_emission_equals_mean(rng):
    means = draw_means(4, {"audio": 3, "visual": 4, "text": 2}, rng)
    states = np.array([0, 3, 1, 1])
    streams = emit_observations(states, means, {m: 0.0 for m in MODALITIES}, rng)
    for m in MODALITIES:
        np.testing.assert_array_equal(streams[m].raw, means[m][states])


def test_emission_noise_is_centered():
    rng = np.random.default_rng(2)
    means = draw_means(4, {"audio": 3, "visual": 4, "text": 2}, rng)
    states = np.zeros(10_000, dtype=np.int64)
    streams = emit_observations(states, means, {m: 0.1 for m in MODALITIES}, rng)
    for m in MODALITIES:
        assert np.max(np.abs((streams[m].raw - means[m][0]).mean(0))) < 0.01


def test_same_seed_identical_streams():
    a = generate_dataset(SMALL).splits["train"][0]
    b = generate_dataset(SMALL).splits["train"][0]
    for m in MODALITIES:
        np.testing.assert_array_equal(a.streams[m].raw, b.streams[m].raw)


def test_inject_rate_zero_identity():
    s = generate_dataset(SMALL).splits["train"][0]
    out = inject_missing(s, 0.0, "at_most_one", np.random.default_rng(0))
    for m in MODALITIES:
        np.testing.assert_array_equal(out.streams[m].raw, s.streams[m].raw)


def test_inject_rate_one_drops_exactly_one():
    s = generate_dataset(replace(SMALL, T=50)).splits["train"][0]
    out = inject_missing(s, 1.0, "at_most_one", np.random.default_rng(0))
    missing = np.stack([~out.streams[m].present for m in MODALITIES])
    np.testing.assert_array_equal(missing.sum(0), np.ones(50))
    for m in MODALITIES:
        assert np.all(out.streams[m].raw[~out.streams[m].present] == 0)


def test_independent_rate_frequency():
    masks = missing_masks(100_000 // 3 + 1, {m: 0.4 for m in MODALITIES}, "independent", np.random.default_rng(4))
    frac = 1 - np.mean(np.stack(list(masks.values())))
    assert abs(frac - 0.4) < 0.01


def test_at_most_one_never_two():
    rng = np.random.default_rng(5)
    masks = missing_masks(20_000, {"audio": 0.3, "visual": 0.3, "text": 0.4}, "at_most_one", rng)
    missing = np.stack([~v for v in masks.values()]).sum(0)
    assert missing.max() <= 1
    assert abs(np.mean(~masks["text"]) - 0.4) < 0.02


def test_at_most_one_rejects_excess_rates(rng):
    with pytest.raises(ValueError):
        missing_masks(4, {m: 0.5 for m in MODALITIES}, "at_most_one", rng)
    with pytest.raises(ConfigError):
        generate_dataset(replace(SMALL, missing_rate_audio=0.6, missing_rate_text=0.6))


def test_apply_masks_does_not_mutate():
    s = generate_dataset(SMALL).splits["train"][0]
    before = s.streams["audio"].raw.copy()
    apply_masks(s, {"audio": np.zeros(6, bool)})
    np.testing.assert_array_equal(s.streams["audio"].raw, before)


def test_generator_missing_rates_applied():
    ds = generate_dataset(replace(SMALL, T=40, n_train=20, missing_rate_visual=0.5))
    frac = np.mean([np.mean(~s.streams["visual"].present) for s in ds.splits["train"]])
    assert 0.35 < frac < 0.65


def test_audio_burst_schedule():
    s = generate_dataset(SMALL).splits["train"][0]
    sigma = SMALL.sigma_audio
    np.testing.assert_allclose(s.noise[0], [sigma, sigma] + [4 * sigma] * 3 + [sigma])
    np.testing.assert_allclose(s.noise[1:], sigma)


def test_random_burst_hits_one_modality():
    ds = generate_dataset(replace(SMALL, noise_schedule="random_burst", n_train=30))
    hit = set()
    for s in ds.splits["train"]:
        raised = s.noise > SMALL.sigma_audio + 1e-12
        assert raised.sum() == 3 and raised.any(1).sum() == 1
        hit.add(int(np.argmax(raised.any(1))))
    assert hit == {0, 1, 2}


def test_same_config_same_fingerprint():
    a, b = generate_dataset(SMALL), generate_dataset(SMALL)
    assert a.fingerprint == b.fingerprint
    assert generate_dataset(replace(SMALL, seed=4)).fingerprint != a.fingerprint


def test_default_split_sizes_and_balance(default_ds):
    assert [len(default_ds.splits[s]) for s in ("train", "val", "test")] == [600, 100, 200]
    for split in ("train", "val", "test"):
        labels = np.concatenate([s.labels for s in default_ds.splits[split]])
        share = np.bincount(labels, minlength=4) / labels.size
        assert np.all((share >= 0.225) & (share <= 0.275)), share


def test_balanced_groups_are_relabelings():
    ds = generate_dataset(replace(SMALL, n_train=8))
    sessions = ds.splits["train"]
    for k in range(1, 4):
        np.testing.assert_array_equal(sessions[k].labels, (sessions[0].labels + k) % 4)
    assert not np.array_equal(sessions[0].streams["audio"].raw, sessions[1].streams["audio"].raw)


def test_unbalanced_option_draws_independent_chains():
    ds = generate_dataset(replace(SMALL, balance_labels=False, T=30))
    a, b = ds.splits["train"][:2]
    assert not np.array_equal((a.labels - b.labels) % 4, np.full(30, (a.labels[0] - b.labels[0]) % 4))


def test_noiseless_nearest_mean_is_perfect():
    ds = generate_dataset(replace(SMALL, sigma_audio=0.0, sigma_visual=0.0, sigma_text=0.0, n_train=20))
    for m in MODALITIES:
        for s in ds.splits["train"]:
            d = ((s.streams[m].raw[:, None, :] - ds.means[m][None]) ** 2).sum(-1)
            np.testing.assert_array_equal(d.argmin(1), s.labels)


def test_round_trip_bit_exact(tmp_path):
    ds = generate_dataset(replace(SMALL, missing_rate_text=0.3))
    path = tmp_path / "d.afus"
    serialize_dataset(ds, path)
    back = deserialize_dataset(path)
    assert back.config == ds.config and back.fingerprint == ds.fingerprint
    for m in MODALITIES:
        assert back.means[m].tobytes() == ds.means[m].tobytes()
    for split in ("train", "val", "test"):
        for a, b in zip(ds.splits[split], back.splits[split]):
            assert a.id == b.id and a.labels.tobytes() == b.labels.tobytes()
            assert a.noise.tobytes() == b.noise.tobytes()
            for m in MODALITIES:
                assert a.streams[m].raw.tobytes() == b.streams[m].raw.tobytes()
                np.testing.assert_array_equal(a.streams[m].present, b.streams[m].present)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "d.afus"
    serialize_dataset(generate_dataset(SMALL), path)
    data = path.read_bytes()
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(FormatError):
            deserialize_dataset(path)


def _record(name, arr, code):
    arr = np.ascontiguousarray(arr)
    head = struct.pack("<H", len(name)) + name.encode() + struct.pack("<BB", code, arr.ndim)
    return head + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()


def test_hand_crafted_minimal_file(tmp_path):
    meta = b"data.T = 2\ndata.dim_audio = 1\ndata.dim_visual = 2\ndata.dim_text = 1\n"
    recs = [_record("means/audio", np.zeros((4, 1), "<f8"), 0),
            _record("means/visual", np.zeros((4, 2), "<f8"), 0),
            _record("means/text", np.zeros((4, 1), "<f8"), 0),
            _record("train/s0/labels", np.array([1, 2], "<i8"), 1),
            _record("train/s0/noise", np.full((3, 2), 0.5, "<f8"), 0)]
    for m, D in (("audio", 1), ("visual", 2), ("text", 1)):
        recs.append(_record(f"train/s0/{m}", np.arange(2 * D, dtype="<f8").reshape(2, D), 0))
        recs.append(_record(f"train/s0/{m}_present", np.array([1, 0], "u1"), 2))
    body = (b"AFUS" + struct.pack("<HHI", 1, 0, len(meta)) + meta + hashlib.sha256(meta).digest()
            + struct.pack("<I", len(recs)) + b"".join(recs))
    path = tmp_path / "hand.afus"
    path.write_bytes(body + hashlib.sha256(body).digest())
    ds = deserialize_dataset(path)
    assert ds.config.T == 2 and len(ds.splits["train"]) == 1 and ds.splits["test"] == []
    s = ds.splits["train"][0]
    assert s.id == "s0" and s.streams["visual"].raw.shape == (2, 2)
    np.testing.assert_array_equal(s.labels, [1, 2])
    np.testing.assert_array_equal(s.streams["text"].present, [True, False])
