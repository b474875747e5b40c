import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prefdiff.datastore import (
    Dataset, SegmentSampler, StateNormalizer, Trajectory, apply_slice, batch_segments, compute_rtg,
    load_dataset, ood_mask, save_dataset, slice_narrow, slice_shattered,
)
from prefdiff.errors import ConfigError, InputError, MissingArtifact
from prefdiff.momdp import collect_dataset


def synthetic(n=100, length=3, seed=0):
    rng = np.random.default_rng(seed)
    w1 = rng.permutation(np.linspace(0.0, 1.0, n))
    trajs = []
    for i in range(n):
        trajs.append(compute_rtg(Trajectory(
            id=i, omega=np.array([w1[i], 1 - w1[i]]), states=rng.normal(size=(length, 2)),
            actions=rng.uniform(-1, 1, size=(length, 1)), rewards=rng.normal(size=(length, 2)))))
    return Dataset(trajs, {"seed": seed})


def one(rewards):
    r = np.asarray(rewards, dtype=float)
    return compute_rtg(Trajectory(0, np.array([0.5, 0.5]), np.zeros((len(r), 2)), np.zeros((len(r), 1)), r))


def test_rtg_examples():
    t = one([[2, 3]])
    assert np.array_equal(t.rtg[0], [2, 3]) and np.array_equal(t.traj_rtg, [2, 3])
    t = one([[1, 0], [1, 0]])
    assert np.array_equal(t.rtg, [[2, 0], [1, 0]]) and np.array_equal(t.traj_rtg, [1.5, 0])


@given(st.integers(1, 40), st.integers(0, 10_000))
def test_rtg_properties(length, seed):
    r = np.random.default_rng(seed).normal(size=(length, 2))
    t = one(r)
    assert np.allclose(t.rtg[0], r.sum(0))
    assert np.allclose(t.rtg[:-1] - t.rtg[1:], r[:-1])
    again = compute_rtg(t)
    assert np.array_equal(again.rtg, t.rtg) and np.array_equal(again.traj_rtg, t.traj_rtg)


def test_trajectory_length_mismatch():
    with pytest.raises(ConfigError):
        Trajectory(0, np.ones(2), np.zeros((3, 2)), np.zeros((2, 1)), np.zeros((3, 2)))


# ---------------------------------------------------------------- slicing

def _gaps(ds):
    w = np.sort(ds.omegas[:, 0])
    return np.diff(w)


def test_shattered_counts_and_gaps():
    full = synthetic()
    out = slice_shattered(full, 30, 3)
    assert len(out) == 70
    assert [len(r) for r in out.ood_regions] == [2, 2, 2]
    removed = set(full.ids) - set(out.ids)
    assert len(removed) == 30 and sorted(removed) == out.manifest["slice"]["removed_ids"]
    gaps = _gaps(out)
    wide = gaps > np.median(_gaps(full)) + 1e-9
    assert wide.sum() == 3
    # three equal gaps: each removal block has 10 trajectories
    assert np.allclose(np.sort(gaps)[-3:], 11 / 99)


def test_narrow_counts():
    full = synthetic()
    out = slice_narrow(full, 30)
    assert len(out) == 70
    w = np.sort(full.omegas[:, 0])
    kept = np.sort(out.omegas[:, 0])
    assert kept[0] == w[15] and kept[-1] == w[-16]
    assert w.min() < kept.min() and kept.max() < w.max()
    mask = ood_mask(full.omegas, out.ood_regions)
    assert mask.sum() == 30


def test_slicing_zero_m_and_complete_are_identity():
    full = synthetic()
    for out in (slice_shattered(full, 0, 3), slice_narrow(full, 0), apply_slice(full, "complete")):
        assert out.ids == full.ids


def test_slicing_does_not_mutate_survivors():
    full = synthetic()
    out = slice_shattered(full, 30, 3)
    by_id = {t.id: t for t in full}
    for t in out:
        assert t is by_id[t.id]


@pytest.mark.parametrize("m", [100, 150, -1])
def test_bad_m_rejected(m):
    with pytest.raises(InputError):
        slice_narrow(synthetic(), m)


def test_unknown_slice_kind():
    with pytest.raises(InputError):
        apply_slice(synthetic(), "torn")


def test_ood_mask_half_open_ends():
    regions = [[0.0, 0.2], [0.4, 0.5], [0.8, 1.0]]
    w = np.array([[0.1, 0.9], [0.2, 0.8], [0.45, 0.55], [0.5, 0.5], [0.8, 0.2], [0.9, 0.1]])
    assert ood_mask(w, regions).tolist() == [True, False, True, True, False, True]


# ---------------------------------------------------------------- segments

def test_full_horizon_windows_start_at_zero():
    ds = synthetic(10, length=5)
    s = SegmentSampler(ds, 5)
    assert len(s) == 10 and np.all(s.starts == 0)


def test_short_trajectory_is_edge_padded():
    ds = synthetic(2, length=3)
    s = SegmentSampler(ds, 5)
    assert np.array_equal(s.windows[0, 3:], np.repeat(ds[0].states[-1:], 2, axis=0))


def test_batches_are_deterministic():
    ds = synthetic(20, length=8)
    a = next(batch_segments(ds, 4, 16, np.random.default_rng(3)))
    b = next(batch_segments(ds, 4, 16, np.random.default_rng(3)))
    assert np.array_equal(a.x0, b.x0) and np.array_equal(a.traj_index, b.traj_index)


def test_trajectory_selection_is_uniform():
    ds = synthetic(20, length=8)
    s = SegmentSampler(ds, 4)
    counts = np.bincount(s.sample(np.random.default_rng(0), 100_000).traj_index, minlength=20)
    expected = 100_000 / 20
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 43.8  # 99.9th percentile of chi-square with 19 dof


def test_window_condition_uses_trajectory_average():
    ds = synthetic(5, length=6)
    b = SegmentSampler(ds, 3).sample(np.random.default_rng(0), 10)
    for i, ti in enumerate(b.traj_index):
        assert np.array_equal(b.g[i], ds[ti].traj_rtg)


@given(st.integers(0, 1000))
def test_state_normalizer_roundtrip(seed):
    ds = synthetic(10, length=4, seed=seed)
    n = StateNormalizer.fit(ds)
    s = ds[0].states
    assert np.allclose(n.denormalize(n.normalize(s)), s, atol=1e-12, rtol=0)
    assert np.array_equal(StateNormalizer.from_dict(n.to_dict()).mean, n.mean)


# ---------------------------------------------------------------- files

def test_save_load_roundtrip_is_byte_identical(tmp_path):
    ds = slice_narrow(collect_dataset("amateur", 40, seed=2), 30)
    save_dataset(ds, tmp_path / "a")
    back = load_dataset(tmp_path / "a")
    assert back.ids == ds.ids and back.ood_regions == ds.ood_regions
    assert all(np.array_equal(x.rtg, y.rtg) and x.perturbed == y.perturbed for x, y in zip(back, ds))
    save_dataset(back, tmp_path / "b")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == len(ds)


def test_missing_dataset(tmp_path):
    with pytest.raises(MissingArtifact):
        load_dataset(tmp_path / "nope")
