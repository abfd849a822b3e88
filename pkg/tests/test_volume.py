import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from maeseg import ConfigError, ShapeError, Volume
from maeseg.volume import (
    PatchSequence,
    clamp_and_normalize,
    patchify,
    patchify_tensor,
    preprocess,
    read_volume,
    resample,
    unpatchify,
    unpatchify_tensor,
    write_volume,
)


def test_volume_validation():
    with pytest.raises(ShapeError):
        Volume(np.zeros((4, 4)))
    with pytest.raises(ConfigError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ConfigError):
        Volume(np.full((2, 2, 2), 0.5), kind="label")
    assert Volume(np.ones((2, 3, 4)), kind="label").shape == (2, 3, 4)


@pytest.mark.parametrize("x, expected", [(-800, 0.0), (500, 1.0), (0, 0.5), (-500, 0.0), (250, 0.75)])
def test_clamp_and_normalize_values(x, expected):
    v = Volume(np.full((2, 2, 2), float(x)), spacing=(0.5, 1, 2))
    out = clamp_and_normalize(v, -500, 500)
    assert np.all(out.data == np.float32(expected))
    assert out.shape == v.shape and out.spacing == v.spacing


def test_clamp_rejects_bad_window_and_labels():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ConfigError):
        clamp_and_normalize(v, 500, 500)
    with pytest.raises(ConfigError):
        clamp_and_normalize(Volume(np.zeros((2, 2, 2)), kind="label"))


def test_resample_identity_and_factor_two(rng):
    v = Volume(rng.normal(size=(64, 64, 64)).astype(np.float32))
    same = resample(v, (1, 1, 1))
    assert np.array_equal(same.data, v.data)
    half = resample(v, (2, 2, 2))
    assert half.shape == (32, 32, 32) and half.spacing == (2.0, 2.0, 2.0)


@pytest.mark.parametrize("target", [(2, 2, 2), (0.7, 1.3, 3.1), (1.5, 1.0, 0.5)])
def test_resample_constant_stays_constant(target):
    v = Volume(np.full((10, 12, 9), 3.25, np.float32), spacing=(1.0, 1.2, 0.8))
    out = resample(v, target)
    expected = tuple(max(1, round(n * s / t)) for n, s, t in zip(v.shape, v.spacing, target))
    assert out.shape == expected
    assert np.all(out.data == np.float32(3.25))


def test_resample_labels_stay_binary(rng):
    lab = Volume((rng.random((12, 12, 12)) > 0.6).astype(np.float32), kind="label")
    out = resample(lab, (0.7, 1.4, 1.1))
    assert set(np.unique(out.data)) <= {0.0, 1.0}


def test_preprocess_order_clamps_before_resampling():
    data = np.zeros((4, 4, 4), np.float32)
    data[:2] = 2000.0  # far above the window
    out = preprocess(Volume(data), -500, 500, (2, 1, 1))
    assert out.data.max() == 1.0 and out.shape == (2, 4, 4)


def test_patchify_counts_and_single_patch(rng):
    v = Volume(rng.normal(size=(32, 32, 32)).astype(np.float32))
    s = patchify(v, 16)
    assert s.tokens.shape == (8, 4096) and s.grid_shape == (2, 2, 2)
    one = Volume(rng.normal(size=(16, 16, 16)).astype(np.float32))
    assert np.array_equal(patchify(one, 16).tokens[0], one.data.ravel(order="F"))


def test_patchify_matches_loop_oracle(rng):
    data = rng.normal(size=(8, 12, 4)).astype(np.float32)
    assert np.array_equal(patchify(Volume(data), 4).tokens, oracles.patchify(data, 4))


@settings(max_examples=25, deadline=None)
@given(gx=st.integers(1, 3), gy=st.integers(1, 3), gz=st.integers(1, 3), p=st.sampled_from([1, 2, 4]),
       seed=st.integers(0, 2**16))
def test_patchify_round_trip(gx, gy, gz, p, seed):
    data = np.random.default_rng(seed).normal(size=(gx * p, gy * p, gz * p)).astype(np.float32)
    v = Volume(data, spacing=(0.5, 1.0, 2.0))
    s = patchify(v, p)
    back = unpatchify(s)
    assert np.array_equal(back.data, data) and back.spacing == v.spacing
    t = patchify_tensor(torch.as_tensor(data)[None], p)
    assert np.array_equal(t[0].numpy(), s.tokens)
    assert np.array_equal(unpatchify_tensor(t, s.grid_shape, p)[0].numpy(), data)


def test_patchify_error_names_axis():
    with pytest.raises(ShapeError, match="axis y"):
        patchify(Volume(np.zeros((32, 30, 32))), 16)


def test_unpatchify_zero_and_one_hot():
    s = PatchSequence(np.zeros((8, 8), np.float32), (2, 2, 2), 2)
    assert not unpatchify(s).data.any()
    tokens = np.zeros((8, 8), np.float32)
    tokens[0, 0] = 1
    v = unpatchify(PatchSequence(tokens, (2, 2, 2), 2))
    assert v.data[0, 0, 0] == 1 and v.data.sum() == 1


def test_patch_sequence_rejects_mismatch():
    with pytest.raises(ShapeError):
        PatchSequence(np.zeros((8, 8), np.float32), (3, 2, 2), 2)
    with pytest.raises(ShapeError):
        PatchSequence(np.zeros((8, 7), np.float32), (2, 2, 2), 2)


def test_volume_file_round_trip_is_bit_exact(tmp_path, rng):
    data = rng.normal(size=(5, 6, 7)).astype(np.float32)
    data[0, 0, 0] = np.float32(1e-38)
    v = Volume(data, spacing=(0.25, 1.5, 3.0))
    path = write_volume(tmp_path / "case", v)
    assert path.suffix == ".vol"
    meta = json.loads((tmp_path / "case.json").read_text())
    assert meta == {"shape": [5, 6, 7], "spacing": [0.25, 1.5, 3.0], "kind": "image"}
    # x fastest, z slowest on disk
    raw = np.frombuffer(path.read_bytes(), "<f4")
    assert raw[1] == data[1, 0, 0] and raw[5] == data[0, 1, 0] and raw[30] == data[0, 0, 1]
    back = read_volume(tmp_path / "case.vol")
    assert back.data.tobytes() == data.tobytes() and back.spacing == v.spacing


def test_read_volume_detects_truncation(tmp_path):
    path = write_volume(tmp_path / "x", Volume(np.zeros((2, 2, 2))))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ShapeError):
        read_volume(path)
