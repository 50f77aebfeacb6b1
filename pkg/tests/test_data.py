import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zslattack import data
from zslattack.data import SyntheticSpec
from zslattack.model import SemanticSpace

SMALL = dict(n_seen=3, n_unseen=2, d_s=6, image_side=8, train_per_class=4, test_seen_per_class=2,
             test_unseen_per_class=3)


def small(**kw):
    return data.generate(SyntheticSpec(**{**SMALL, **kw}))


def test_same_seed_is_bit_identical():
    a, b = small(seed=3), small(seed=3)
    assert a == b
    assert not np.array_equal(a.images, small(seed=4).images)


def test_partitions_and_counts():
    ds = small(seed=1)
    ds.check_partitions()
    st_ = ds.stats()
    assert (st_["n_seen"], st_["n_unseen"]) == (3, 2)
    assert (st_["n_train"], st_["n_test_seen"], st_["n_test_unseen"]) == (12, 6, 6)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    np.testing.assert_array_equal(ds.images, ds.images.astype(np.float32))


def test_angular_floor_holds():
    ds = small(seed=2, min_angle_deg=25.0)
    unit = ds.space.prototypes / np.linalg.norm(ds.space.prototypes, axis=1, keepdims=True)
    cos = unit @ unit.T
    np.fill_diagonal(cos, -1)
    assert cos.max() <= np.cos(np.deg2rad(25.0)) + 1e-6


def test_noiseless_classes_are_linearly_separable():
    ds = small(seed=5, noise_sigma=0.0, concept_jitter=0.0, n_seen=2, n_unseen=1, min_angle_deg=45.0)
    a, b = ds.space.seen_ids
    mask = np.isin(ds.labels, [a, b])
    x = ds.images[mask].reshape(mask.sum(), -1)
    y = np.where(ds.labels[mask] == a, 1.0, -1.0)
    design = np.hstack([x, np.ones((len(x), 1))])
    w, *_ = np.linalg.lstsq(design, y, rcond=None)
    assert np.all(np.sign(design @ w) == y)


def test_infeasible_and_invalid_specs():
    with pytest.raises(ValueError, match="infeasible"):
        data.generate(SyntheticSpec(n_seen=2, n_unseen=1, d_s=100, image_side=4, channels=1))
    with pytest.raises(ValueError):
        SyntheticSpec(n_seen=2, n_unseen=1, d_s=4, image_side=10)
    with pytest.raises(ValueError):
        SyntheticSpec(n_seen=1, n_unseen=1, d_s=4)


def test_presets():
    assert set(data.PRESETS) == {"mini-awa2", "mini-cub", "mini-sun"}
    awa = data.preset("mini-awa2")
    assert (awa.n_seen, awa.n_unseen, awa.d_s, awa.train_per_class, awa.seed) == (8, 2, 16, 20, 7)
    assert (data.preset("mini-cub").n_seen, data.preset("mini-cub").n_unseen) == (12, 4)
    with pytest.raises(KeyError):
        data.preset("mini-imagenet")


def test_generated_prototypes_have_no_missing_entries():
    ds = data.generate(data.preset("mini-awa2"))
    assert np.all(ds.space.prototypes >= 0)


# ---------------------------------------------------------------- imputation

def test_impute_examples():
    protos = np.array([[0.2, 0.5], [-1.0, 0.1], [0.4, 0.9]])
    out = data.impute_missing(protos)
    assert out[1, 0] == pytest.approx(0.3)
    np.testing.assert_array_equal(out[[0, 2]], protos[[0, 2]])
    np.testing.assert_array_equal(out[:, 1], protos[:, 1])
    clean = np.array([[0.1, 0.2], [0.3, 0.4]])
    np.testing.assert_array_equal(data.impute_missing(clean), clean)


def test_impute_all_missing_dimension():
    with pytest.raises(data.ImputationError, match=r"\[1\]"):
        data.impute_missing(np.array([[0.2, -1.0], [0.4, -1.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_impute_keeps_observed_entries(seed):
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0, 1, (5, 4))
    protos[0] = rng.uniform(0, 1, 4)
    missing = rng.random(protos.shape) < 0.3
    missing[0] = False
    protos[missing] = -1.0
    out = data.impute_missing(protos)
    np.testing.assert_array_equal(out[~missing], protos[~missing])
    assert np.all(out >= 0)


def test_concept_csv_scale_and_missing(tmp_path):
    path = tmp_path / "concepts.csv"
    path.write_text("stripes,water\n20,-1\n40,80\n60,40\n")
    space = data.load_concept_csv(path, [0, 1], [2])
    assert space.concept_names == ["stripes", "water"]
    np.testing.assert_allclose(space.prototypes, [[0.2, 0.6], [0.4, 0.8], [0.6, 0.4]])


def test_concept_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n0.1\n")
    with pytest.raises(data.FormatError):
        data.load_concept_csv(bad, [0], [])
    bad.write_text("a,b\n0.1,x\n")
    with pytest.raises(data.FormatError):
        data.load_concept_csv(bad, [0], [])


# ----------------------------------------------------------------- container

@pytest.fixture
def saved(tmp_path):
    ds = small(seed=8)
    path = tmp_path / "ds.zadt"
    data.save(ds, path)
    return ds, path


def test_round_trip(saved):
    ds, path = saved
    back = data.load(path)
    assert back == ds
    back.check_partitions()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 3))
def test_round_trip_any_dataset(tmp_path_factory, seed, channels):
    ds = small(seed=seed, channels=channels)
    path = tmp_path_factory.mktemp("rt") / "ds.zadt"
    data.save(ds, path)
    assert data.load(path) == ds


def test_corrupt_magic(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(data.FormatError, match="magic"):
        data.load(path)


def test_next_version_rejected(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", data.VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(data.UnsupportedVersionError):
        data.load(path)


def test_truncated_and_trailing(saved):
    _, path = saved
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(data.IntegrityError, match="truncated"):
        data.load(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(data.IntegrityError, match="trailing"):
        data.load(path)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 255))
def test_random_header_corruption_never_crashes(tmp_path_factory, pos, value):
    ds = small(seed=0, n_seen=2, n_unseen=1, train_per_class=1, test_seen_per_class=1, test_unseen_per_class=1)
    path = tmp_path_factory.mktemp("corrupt") / "ds.zadt"
    data.save(ds, path)
    raw = bytearray(path.read_bytes())
    raw[pos % 64] = value
    path.write_bytes(bytes(raw))
    try:
        data.load(path)
    except data.FormatError:
        pass


def test_missing_tensor(tmp_path):
    path = tmp_path / "x.zadt"
    data.write_container(path, {"images": np.zeros((1, 2, 2, 1))}, [0], [0], [0], [])
    with pytest.raises(data.FormatError, match="prototypes"):
        data.load(path)


def test_partition_violation_is_format_error(tmp_path):
    path = tmp_path / "x.zadt"
    data.write_container(path, {"images": np.zeros((1, 2, 2, 1)), "prototypes": np.eye(2)}, [1], [0], [0], [1])
    with pytest.raises(data.FormatError):
        data.load(path)


def test_dataset_space_type():
    assert isinstance(small().space, SemanticSpace)
