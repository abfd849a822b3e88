import json

import numpy as np
import pytest
from scipy import ndimage

from maeseg import ConfigError, PhantomError
from maeseg.phantom import FAMILIES, PhantomSpec, bone_mask, case_seeds, file_digest, generate, generate_dataset


@pytest.mark.parametrize("family", FAMILIES)
def test_no_fracture_no_noise_gives_uncut_mask(family):
    spec = PhantomSpec(seed=5, shape=(32, 32, 32), family=family, n_fractures=0, noise_sigma=0)
    image, label = generate(spec)
    assert np.array_equal(label.data.astype(bool), bone_mask(spec))
    assert set(np.unique(image.data)) == {0.0, 700.0}
    assert label.kind == "label" and image.kind == "image"


def test_generation_is_deterministic():
    spec = PhantomSpec(seed=11, shape=(32, 32, 32))
    (a, la), (b, lb) = generate(spec), generate(spec)
    assert a.data.tobytes() == b.data.tobytes() and la.data.tobytes() == lb.data.tobytes()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gaps_separate_fragments_by_at_least_gap_width(seed):
    spec = PhantomSpec(seed=seed, shape=(40, 40, 40), n_fractures=1, gap_width=2.0, noise_sigma=0)
    _, label = generate(spec)
    fragments, n = ndimage.label(label.data.astype(bool))
    assert n >= 2
    # nearest pair of voxels in different fragments
    coords = [np.argwhere(fragments == i) for i in range(1, n + 1)]
    for i in range(n):
        for j in range(i + 1, n):
            dt = ndimage.distance_transform_edt(fragments != i + 1)
            assert dt[tuple(coords[j].T)].min() >= 2.0


def test_noise_level_and_contrast():
    spec = PhantomSpec(seed=3, shape=(32, 32, 32), noise_sigma=20.0)
    image, label = generate(spec)
    bg = image.data[label.data == 0]
    assert abs(bg.mean()) < 2.0 and abs(bg.std() - 20.0) < 1.0


def test_invalid_specs():
    with pytest.raises(ConfigError):
        generate(PhantomSpec(family="skull"))
    with pytest.raises(ConfigError):
        generate(PhantomSpec(noise_sigma=-1))
    with pytest.raises(PhantomError):
        generate(PhantomSpec(shape=(32, 32, 32), gap_width=40.0))


def test_case_seeds_disjoint_and_stable():
    a = case_seeds(7, 200)
    assert len(set(a)) == 200 and a == case_seeds(7, 200) and a != case_seeds(8, 200)


def test_dataset_counts_and_layout(tmp_path):
    counts = {"labeled": 2, "unlabeled": 3, "val": 1, "test": 2}
    manifest = generate_dataset(0, counts, "tibia-like", tmp_path, PhantomSpec(shape=(16, 16, 16), gap_width=1.0))
    assert len(manifest) == 8
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == manifest
    train = [e for e in manifest if e["split"] == "train"]
    assert len(train) == 5 and sum(e["label_path"] is not None for e in train) == 2
    assert all(e["label_path"] is not None for e in manifest if e["split"] in ("val", "test"))
    for e in manifest:
        assert (tmp_path / e["image_path"]).is_file()


def test_default_split_sizes_plan():
    from maeseg.phantom import plan_dataset

    plan = list(plan_dataset(0, {"labeled": 20, "unlabeled": 50, "val": 10, "test": 100}, "tibia-like"))
    assert len(plan) == 180
    assert sum(1 for _, split, has_label, _ in plan if split == "train" and has_label) == 20
    assert len({spec.seed for *_, spec in plan}) == 180


def test_single_labeled_case(tmp_path):
    manifest = generate_dataset(1, {"labeled": 1}, "pelvis-like", tmp_path, PhantomSpec(shape=(32, 32, 32)))
    assert len(manifest) == 1 and manifest[0]["label_path"] is not None


def test_same_seed_same_files(tmp_path):
    tmpl = PhantomSpec(shape=(16, 16, 16), gap_width=1.0)
    counts = {"labeled": 1, "unlabeled": 1, "test": 1}
    m1 = generate_dataset(4, counts, "tibia-like", tmp_path / "a", tmpl, workers=2)
    m2 = generate_dataset(4, counts, "tibia-like", tmp_path / "b", tmpl)
    assert m1 == m2
    for e in m1:
        assert file_digest(tmp_path / "a" / e["image_path"]) == file_digest(tmp_path / "b" / e["image_path"])


def test_unknown_split_key_rejected(tmp_path):
    with pytest.raises(ConfigError):
        generate_dataset(0, {"train": 3}, "tibia-like", tmp_path)
