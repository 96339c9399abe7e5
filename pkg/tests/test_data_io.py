import json
import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from bbsnet import data_io as D


def write_triple(root, stem, size=(48, 64), depth=None, gt=None, rgb_mode="RGB", depth16=False, seed=0):
    h, w = size
    rng = np.random.default_rng(seed)
    for sub in D.SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    Image.fromarray(rng.integers(0, 256, (h, w, 3), dtype=np.uint8), mode=rgb_mode).save(root / "RGB" / f"{stem}.png")
    if depth is None:
        depth = rng.integers(0, 65536 if depth16 else 256, (h, w))
    if depth16:
        Image.fromarray(np.asarray(depth, dtype=np.uint16)).save(root / "depth" / f"{stem}.png")
    else:
        Image.fromarray(np.asarray(depth, dtype=np.uint8), mode="L").save(root / "depth" / f"{stem}.png")
    if gt is None:
        gt = (rng.random((h, w)) > 0.5) * 255
    Image.fromarray(np.asarray(gt, dtype=np.uint8), mode="L").save(root / "GT" / f"{stem}.png")


def test_three_matched_triples(tmp_path):
    for s in ("c", "a", "b"):
        write_triple(tmp_path, s)
    m = D.load_dataset(tmp_path, "toy")
    assert len(m) == 3 and m.ids == ["a", "b", "c"] and m.unmatched == []


def test_unmatched_reported(tmp_path, caplog):
    write_triple(tmp_path, "a")
    Image.new("RGB", (8, 8)).save(tmp_path / "RGB" / "lonely.png")
    with caplog.at_level(logging.WARNING):
        m = D.load_dataset(tmp_path)
    assert m.ids == ["a"]
    assert any("lonely" in u for u in m.unmatched)


def test_rgb_only_is_fatal(tmp_path):
    for sub in D.SUBDIRS:
        (tmp_path / sub).mkdir()
    Image.new("RGB", (8, 8)).save(tmp_path / "RGB" / "x.png")
    with pytest.raises(D.DatasetError, match="zero matched triples"):
        D.load_dataset(tmp_path)


def test_missing_directory_is_fatal(tmp_path):
    (tmp_path / "RGB").mkdir()
    with pytest.raises(D.DatasetError, match="missing directory"):
        D.load_dataset(tmp_path)


def test_shape_mismatch_listed_per_sample(tmp_path):
    write_triple(tmp_path, "good")
    write_triple(tmp_path, "bad")
    Image.new("L", (10, 10)).save(tmp_path / "GT" / "bad.png")
    m = D.load_dataset(tmp_path)
    assert m.ids == ["good"]
    assert m.errors and m.errors[0][0] == "bad" and "shape mismatch" in m.errors[0][1]


def test_manifest_json(tmp_path):
    write_triple(tmp_path, "a", size=(30, 40))
    rows = json.loads(D.load_dataset(tmp_path).to_json())["entries"]
    assert rows[0]["id"] == "a" and rows[0]["dims"] == [30, 40]


def test_load_sample_resizes_and_binarizes(tmp_path):
    write_triple(tmp_path, "a", size=(480, 640))
    s = D.load_sample(D.load_dataset(tmp_path).entries[0])
    assert s.rgb.shape == (352, 352, 3) and s.depth.shape == (352, 352, 1) and s.gt.shape == (352, 352, 1)
    assert set(np.unique(s.gt)) <= {0.0, 1.0}
    assert s.depth.min() == 0 and s.depth.max() == 1
    assert s.orig_size == (480, 640)
    assert 0 <= s.rgb.min() and s.rgb.max() <= 1


def test_sixteen_bit_depth(tmp_path):
    d = np.arange(48 * 64).reshape(48, 64) * 20
    write_triple(tmp_path, "a", depth=d, depth16=True)
    s = D.load_sample(D.load_dataset(tmp_path).entries[0], side=None)
    np.testing.assert_allclose(s.depth[..., 0], d / d.max(), atol=1e-6)


def test_constant_depth_gives_zeros(tmp_path, caplog):
    write_triple(tmp_path, "a", depth=np.full((48, 64), 7))
    with caplog.at_level(logging.WARNING):
        s = D.load_sample(D.load_dataset(tmp_path).entries[0], side=64)
    assert (s.depth == 0).all()
    assert "constant depth" in caplog.text


def test_invert_depth(tmp_path):
    write_triple(tmp_path, "a")
    e = D.load_dataset(tmp_path).entries[0]
    a = D.load_sample(e, side=None)
    b = D.load_sample(e, side=None, invert_depth=True)
    np.testing.assert_allclose(a.depth, 1 - b.depth, atol=1e-6)


def test_undecodable_file(tmp_path):
    write_triple(tmp_path, "a")
    (tmp_path / "depth" / "a.png").write_bytes(b"not an image")
    with pytest.raises(D.DatasetError, match="undecodable"):
        D.load_sample((str(tmp_path / "RGB" / "a.png"), str(tmp_path / "depth" / "a.png"),
                       str(tmp_path / "GT" / "a.png")))


def test_sample_invariants_enforced():
    z = np.zeros((4, 4, 1), np.float32)
    with pytest.raises(ValueError):
        D.RgbdSample("x", np.zeros((4, 4, 3), np.float32), np.zeros((4, 5, 1), np.float32), z)
    with pytest.raises(ValueError):
        D.RgbdSample("x", np.zeros((4, 4, 3), np.float32), z, z + 0.5)
    with pytest.raises(ValueError):
        D.RgbdSample("x", np.zeros((4, 4, 3), np.float32), np.zeros((4, 4, 2), np.float32), z)


def test_to_tensors_standardizes():
    rgb = np.full((4, 4, 3), 0.5, np.float32)
    s = D.RgbdSample("x", rgb, np.zeros((4, 4, 1), np.float32), np.ones((4, 4, 1), np.float32))
    r, d, g = D.to_tensors([s, s], mean=(0.5, 0.25, 0.0), std=(1.0, 0.5, 2.0))
    assert r.shape == (2, 3, 4, 4) and d.shape == (2, 1, 4, 4) and g.shape == (2, 1, 4, 4)
    torch.testing.assert_close(r[0, :, 0, 0], torch.tensor([0.0, 0.5, 0.25]))


def _pools(sizes):
    return {name: [f"{name}_{i}" for i in range(n)] for name, n in sizes.items()}


def test_split_counts_and_disjointness():
    pools = _pools({"A": 20, "B": 10})
    spec = D.SplitSpec([("A", 15, 1), ("B", 7, 2)], ["A", "B"])
    train, test = D.materialize_split(spec, pools)
    assert len(train) == 22
    for name in ("A", "B"):
        tr = {x for x in train if x.startswith(name)}
        assert tr.isdisjoint(test[name])
        assert tr | set(test[name]) == set(pools[name])


def test_split_full_dataset_leaves_empty_test():
    pools = _pools({"A": 5})
    _, test = D.materialize_split(D.SplitSpec([("A", 5, 0)], ["A"]), pools)
    assert test["A"] == []


def test_split_deterministic_and_too_large():
    pools = _pools({"A": 30})
    spec = D.SplitSpec([("A", 10, 4)], ["A"])
    assert D.materialize_split(spec, pools) == D.materialize_split(spec, pools)
    assert D.materialize_split(D.SplitSpec([("A", 10, 5)], ["A"]), pools)[0] != D.materialize_split(spec, pools)[0]
    with pytest.raises(D.DatasetError):
        D.materialize_split(D.SplitSpec([("A", 31, 0)], ["A"]), pools)
    with pytest.raises(D.DatasetError):
        D.materialize_split(D.SplitSpec([("Z", 1, 0)], ["A"]), pools)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), frac=st.floats(0, 1), seed=st.integers(0, 1000))
def test_split_partition_property(n, frac, seed):
    pools = _pools({"A": n})
    k = int(frac * n)
    train, test = D.materialize_split(D.SplitSpec([("A", k, seed)], ["A"]), pools)
    assert len(train) == k and sorted(train + test["A"]) == sorted(pools["A"])


def test_saliency_roundtrip_bounds(tmp_path):
    half = np.full((16, 16), 0.5)
    D.save_saliency(half, tmp_path / "h.png")
    raw = np.asarray(Image.open(tmp_path / "h.png"))
    assert set(np.unique(raw)) <= {127, 128}
    assert np.abs(D.read_saliency(tmp_path / "h.png").map - half).max() <= 1 / 255

    binary = (np.random.default_rng(0).random((20, 30)) > 0.5).astype(float)
    D.save_saliency(binary, tmp_path / "b.png")
    assert np.array_equal(D.read_saliency(tmp_path / "b.png").map, binary)

    m = np.random.default_rng(1).random((352, 352))
    D.save_saliency(D.SaliencyMap(m), tmp_path / "r.png")
    assert np.abs(D.read_saliency(tmp_path / "r.png").map - m).max() <= 1 / 255 + 1e-12


def test_saliency_upsampled_to_gt_size(tmp_path):
    D.save_saliency(np.random.default_rng(2).random((88, 88)), tmp_path / "u.png", size=(480, 640))
    assert D.read_saliency(tmp_path / "u.png").map.shape == (480, 640)


def test_saliency_out_of_range_rejected(tmp_path):
    with pytest.raises(ValueError):
        D.save_saliency(np.full((4, 4), 1.2), tmp_path / "x.png")
    with pytest.raises(ValueError):
        D.save_saliency(np.full((4, 4), -0.1), tmp_path / "x.png")
