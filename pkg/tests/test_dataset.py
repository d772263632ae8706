import numpy as np
import pytest

from swe_interp.dataset import (DatasetConfig, DatasetFormatError, SampleParams,
                                file_digest, generate_dataset, generate_pair, initial_pressure,
                                load_dataset, rng_for, sample_params, save_dataset)
from swe_interp.dynamics import PhysicsParams, Trajectory, energy_drift
from swe_interp.fe_core import build_mesh
from swe_interp.trainer import level_l2_sq
from swe_interp.transfer import MeshPair

SMALL = DatasetConfig(coarse_elems=15, fine_elems=60, num_levels=4)


def test_sample_params_deterministic():
    a = [sample_params(rng_for(3, 0, i)) for i in range(5)]
    b = [sample_params(rng_for(3, 0, i)) for i in range(5)]
    assert a == b
    assert a[0] != a[1]


def test_sample_params_distribution():
    rng = np.random.default_rng(0)
    draws = [sample_params(rng) for _ in range(10_000)]
    alpha = np.array([d.alpha for d in draws])
    pos = np.array([d.pos for d in draws])
    ks = {d.k for d in draws}
    assert 1.2 <= alpha.mean() <= 1.3
    assert alpha.min() >= 0.5 and alpha.max() <= 2.0
    assert pos.min() >= 1.0 and pos.max() <= 2.0
    assert ks == set(range(4, 11))
    beta = np.array([d.beta for d in draws])
    assert abs(beta.mean() - 100) < 0.3 and abs(beta.std() - 6) < 0.3


def test_initial_pressure_values():
    sp = SampleParams(1.7, 100.0, 1.3, 6)
    assert initial_pressure(sp, 1.3) == pytest.approx(1.7, rel=1e-15)
    # bump term exp(-25) ~ 1.4e-11, sine term sin(pi k) = 0
    assert abs(initial_pressure(sp, 1.8)) < 1.7 * 2e-11
    assert abs(initial_pressure(sp, 1.8) - 1.7 * np.exp(-25.0)) < 1e-14


def test_initial_pressure_profile_matches_direct_evaluation():
    import math
    sp = SampleParams(0.9, 94.2, 1.77, 10)
    xs = build_mesh(300).midpoints
    ref = [sp.alpha * (math.exp(-sp.beta * (x - sp.pos) ** 2) + math.sin(2 * math.pi * sp.k * (x - sp.pos)) / 10)
           for x in xs]
    np.testing.assert_allclose(initial_pressure(sp, xs), ref, rtol=1e-13, atol=1e-15)


def test_generate_pair_zero_amplitude():
    mp = MeshPair(build_mesh(15), build_mesh(60))
    tp = generate_pair(SampleParams(0.0, 100.0, 1.5, 5), mp, 3, PhysicsParams())
    assert not tp.x_c.data.any() and not tp.x_f.data.any()


def test_generate_pair_structure():
    mp = MeshPair(build_mesh(75), build_mesh(300))
    sp = SampleParams(1.0, 100.0, 1.5, 10)
    tp = generate_pair(sp, mp, 9, PhysicsParams())
    assert tp.x_c.data.shape == tp.x_f.data.shape == (10, 900)
    assert not tp.x_c.data[0, :600].any() and not tp.x_f.data[0, :600].any()
    # coarse pressure is the coarse midpoint sample copied to children
    coarse_p = initial_pressure(sp, build_mesh(75).midpoints)
    np.testing.assert_array_equal(tp.x_c.data[0, 600:], np.repeat(coarse_p, 4))
    np.testing.assert_allclose(tp.x_f.data[0, 600:], initial_pressure(sp, build_mesh(300).midpoints))


def test_dispersion_gap_grows():
    mp = MeshPair(build_mesh(75), build_mesh(300))
    tp = generate_pair(SampleParams(1.0, 100.0, 1.5, 10), mp, 9, PhysicsParams())

    def rel_gap(n):
        gap = level_l2_sq(_t(tp.x_c.data[n] - tp.x_f.data[n]), mp.fine)
        return np.sqrt(gap.item() / level_l2_sq(_t(tp.x_f.data[n]), mp.fine).item())

    assert rel_gap(9) > rel_gap(0)


def _t(x):
    import torch
    return torch.from_numpy(np.asarray(x))


def test_generated_trajectories_conserve_energy():
    ds = generate_dataset(5, seed=2, config=SMALL)
    mesh = SMALL.mesh_pair.fine
    for p in ds.pairs:
        assert energy_drift(p.x_f, 1.0) <= 1e-10
        assert energy_drift(p.x_c, 1.0) <= 1e-10
        assert p.x_c.data.shape == p.x_f.data.shape == (4, 180)
        assert p.x_c.mesh == mesh


def test_split_and_count():
    ds = generate_dataset(10, seed=1, config=SMALL)
    assert ds.split_index == 7 and len(ds.train) == 7 and len(ds.validation) == 3
    with pytest.raises(ValueError):
        generate_dataset(0, seed=1, config=SMALL)


def test_split_default_count():
    from swe_interp.dataset import Dataset
    ds = Dataset(SMALL, 0, [None] * 1000)
    assert (len(ds.train), len(ds.validation)) == (700, 300)


def test_save_load_roundtrip_and_determinism(tmp_path):
    ds = generate_dataset(10, seed=1, config=SMALL)
    a = save_dataset(ds, tmp_path / "a.bin")
    b = save_dataset(generate_dataset(10, seed=1, config=SMALL, threads=3), tmp_path / "b.bin")
    assert file_digest(a) == file_digest(b)
    assert load_dataset(a) == ds
    manifest = (tmp_path / "a.bin.manifest").read_text()
    assert "count=10\n" in manifest and "dimension=180\n" in manifest


def test_different_seed_changes_file(tmp_path):
    a = save_dataset(generate_dataset(3, seed=1, config=SMALL), tmp_path / "a.bin")
    b = save_dataset(generate_dataset(3, seed=2, config=SMALL), tmp_path / "b.bin")
    assert file_digest(a) != file_digest(b)


def test_header_layout(tmp_path):
    import struct
    path = save_dataset(generate_dataset(2, seed=9, config=SMALL), tmp_path / "d.bin")
    raw = path.read_bytes()
    assert raw[:4] == b"SWE1"
    version, mc, mf, n, count = struct.unpack_from("<5I", raw, 4)
    dt, f, g = struct.unpack_from("<3d", raw, 24)
    (seed,) = struct.unpack_from("<Q", raw, 48)
    assert (version, mc, mf, n, count, seed) == (1, 15, 60, 4, 2, 9)
    assert (dt, f, g) == (0.01, 0.1, 1.0)
    assert len(raw) == 56 + 2 * (28 + 2 * 8 * 4 * 180)


def test_load_rejects_corruption(tmp_path):
    path = save_dataset(generate_dataset(2, seed=9, config=SMALL), tmp_path / "d.bin")
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "short.bin")
    with pytest.raises(OSError, match="missing"):
        load_dataset(tmp_path / "missing.bin")


def test_trajectory_shape_validation():
    with pytest.raises(ValueError):
        Trajectory(build_mesh(4), np.zeros((2, 11)))
