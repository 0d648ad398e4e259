import os
import struct

import numpy as np
import pytest

from dynsolve import io, synth
from dynsolve.errors import BadMagic, DimensionMismatch, LayoutError, TruncatedFile
from dynsolve.geometry import Intrinsics, se3_exp


def test_pfm_round_trip_bitwise(tmp_path):
    a = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
    p = tmp_path / "a.pfm"
    io.write_pfm(p, a)
    b = io.read_pfm(p)
    assert b.dtype == np.float32 and b.tobytes() == a.tobytes()


def test_pfm_layout_is_little_endian_bottom_up(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    p = tmp_path / "a.pfm"
    io.write_pfm(p, a)
    raw = p.read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    body = np.frombuffer(raw[len(b"Pf\n2 2\n-1.0\n"):], dtype="<f4")
    assert body.tolist() == [3.0, 4.0, 1.0, 2.0]


def test_pfm_errors(tmp_path):
    p = tmp_path / "bad.pfm"
    p.write_bytes(b"P6\n2 2\n-1.0\n" + bytes(16))
    with pytest.raises(BadMagic):
        io.read_pfm(p)
    p.write_bytes(b"Pf\n2 2\n-1.0\n" + bytes(8))
    with pytest.raises(TruncatedFile):
        io.read_pfm(p)
    with pytest.raises(DimensionMismatch):
        io.write_pfm(tmp_path / "z.pfm", np.zeros((0, 0)))
    io.write_pfm(tmp_path / "ok.pfm", np.zeros((3, 4)))
    with pytest.raises(DimensionMismatch):
        io.read_pfm(tmp_path / "ok.pfm", expected_shape=(4, 3))


def test_flo_round_trip_and_header(tmp_path):
    f = np.random.default_rng(1).normal(size=(6, 9, 2)).astype(np.float32)
    p = tmp_path / "a.flo"
    io.write_flo(p, f)
    raw = p.read_bytes()
    magic, w, h = struct.unpack("<fii", raw[:12])
    assert (magic, w, h) == (202021.25, 9, 6)
    assert io.read_flo(p).tobytes() == f.tobytes()


def test_flo_errors(tmp_path):
    p = tmp_path / "bad.flo"
    p.write_bytes(struct.pack("<fii", 1.0, 2, 2) + bytes(32))
    with pytest.raises(BadMagic):
        io.read_flo(p)
    p.write_bytes(struct.pack("<fii", 202021.25, 2, 2) + bytes(8))
    with pytest.raises(TruncatedFile):
        io.read_flo(p)
    p.write_bytes(struct.pack("<fii", 202021.25, 0, 0))
    with pytest.raises(DimensionMismatch):
        io.read_flo(p)


def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    poses = [se3_exp(rng.normal(size=6)) for _ in range(5)]
    p = tmp_path / "t.txt"
    io.write_trajectory(p, poses)
    idx, back = io.read_trajectory(p)
    assert idx == list(range(5))
    for a, b in zip(poses, back):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-15)


def test_trajectory_rejects_unnormalized_quaternion(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("0 0 0 0 0 0 0 1.1\n")
    with pytest.raises(ValueError):
        io.read_trajectory(p)


def test_intrinsics_and_keyvalue(tmp_path):
    K = Intrinsics(400.5, 400.5, 255.5, 191.5, 512, 384)
    io.write_intrinsics(tmp_path / "k.txt", K)
    assert io.read_intrinsics(tmp_path / "k.txt") == K
    io.write_keyvalue(tmp_path / "kv.txt", {"a": 1, "b": 0.1, "c": True, "d": [1, 2]})
    assert io.read_keyvalue(tmp_path / "kv.txt") == {"a": "1", "b": "0.1", "c": "true", "d": "1,2"}


@pytest.fixture(scope="module")
def small_bundle():
    return synth.generate(synth.SceneSpec(n_frames=5, width=96, height=72, focal=75, trajectory="lateral",
                                          magnitude=0.1, full_resolution=True, max_gap=2))


def test_dataset_round_trip(tmp_path, small_bundle):
    ds = small_bundle.to_dataset()
    io.write_dataset(tmp_path, ds)
    back = io.read_dataset(tmp_path, full_resolution=True)
    assert back.n_frames == ds.n_frames and back.edges == ds.edges
    assert back.intrinsics == ds.intrinsics
    for e in ds.edges:
        assert np.array_equal(back.flows[e], ds.flows[e].astype(np.float32))
    assert np.array_equal(back.disp_rel, ds.disp_rel.astype(np.float32))
    assert back.full_edges == ds.full_edges
    assert back.full_disp_abs.shape == (5, 72, 96)


def test_missing_file_names_path(tmp_path, small_bundle):
    io.write_dataset(tmp_path, small_bundle.to_dataset())
    victim = os.path.join(tmp_path, "flow", "low", io.pair_name(0, 1) + ".flo")
    os.remove(victim)
    with pytest.raises(LayoutError, match="000000_000001.flo"):
        io.read_dataset(tmp_path)
