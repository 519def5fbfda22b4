import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from winmamba.numerics import ContractError, Params, Tensor, backward, sum_all
from winmamba.serialize import (
    EmptySequenceError,
    WindowSpec,
    adjacent_pairs,
    gather,
    locality_report,
    morton_seq_gap,
    serialize_voxels,
    shift_coords,
    unserialize,
    window_keys,
)


def key_oracle(c, extent, axis, shift, grid):
    """Plain-integer re-derivation of one voxel's sort key."""
    wx, wy, wz = extent
    x, y, z = (c[i] + shift[i] for i in range(3))
    nwin = [-(-grid[i] // extent[i]) + 1 for i in range(3)]
    bx, by, bz = x // wx, y // wy, z // wz
    lx, ly, lz = x % wx, y % wy, z % wz
    wi = (bx * nwin[1] + by) * nwin[2] + bz
    if axis == "x":
        iwi = lx * wy * wz + ly * wz + lz
    else:
        iwi = ly * wx * wz + lx * wz + lz
    return wi, iwi, wi * wx * wy * wz + iwi


def dense(n):
    return np.array(list(itertools.product(range(n), repeat=3)))


def test_shift_coords():
    assert shift_coords([[4, 5, 6]], (1, 2, 3)).tolist() == [[5, 7, 9]]
    c = dense(3)
    assert np.array_equal(shift_coords(c, (0, 0, 0)), c)


def test_shift_by_full_extent_moves_one_window():
    c = dense(6)
    spec = WindowSpec((2, 3, 2))
    # a shift equal to the extent is outside WindowSpec's valid range; emulate it on the coordinates
    wi0, iwi0, _ = window_keys(c, spec, (6, 6, 6))
    wi1, iwi1, _ = window_keys(c + np.array(spec.extent), spec, (8, 9, 8))
    nwin0 = np.array([4, 3, 4])
    nwin1 = np.array([5, 4, 5])
    win0 = np.stack(np.unravel_index(wi0, nwin0), 1)
    win1 = np.stack(np.unravel_index(wi1, nwin1), 1)
    assert np.array_equal(win1 - win0, np.ones_like(win0))
    assert np.array_equal(iwi0, iwi1)


def test_window_spec_validation():
    with pytest.raises(ValueError):
        WindowSpec((2, 2, 2), shift=(2, 0, 0))
    with pytest.raises(ValueError):
        WindowSpec((0, 2, 2))
    with pytest.raises(ValueError):
        WindowSpec((2, 2, 2), axis="z")
    assert WindowSpec((13, 13, 32)).shifted().shift == (6, 6, 16)


def test_key_arithmetic_example():
    spec = WindowSpec((2, 2, 2))
    assert spec.volume == 8
    # window grid for a 4^3 extent is 3x3x3; wi=3 is window (0,1,0), iwi=5 is local (1,0,1)
    wi, iwi, k = window_keys([[1, 2, 1]], spec, (4, 4, 4))
    assert (wi[0], iwi[0], k[0]) == (3, 5, 29)


def test_window_origin_has_zero_local_index():
    spec = WindowSpec((3, 2, 4))
    wi, iwi, k = window_keys([[3, 4, 8], [0, 0, 0]], spec, (9, 9, 9))
    assert iwi.tolist() == [0, 0]
    assert np.array_equal(k, wi * 24)


@pytest.mark.parametrize("axis", ["x", "y"])
def test_dense_grid_keys_match_enumeration(axis):
    c = dense(4)
    spec = WindowSpec((2, 2, 2), axis)
    wi, iwi, k = window_keys(c, spec, (4, 4, 4))
    expected = [key_oracle(tuple(v), (2, 2, 2), axis, (0, 0, 0), (4, 4, 4)) for v in c]
    assert np.array_equal(np.stack([wi, iwi, k], 1), np.array(expected))
    # the 4^3 grid fills exactly windows 0..7 in a 2x2x2 sub-block of the 3^3 window grid
    assert len(set(k.tolist())) == 64


def test_dense_grid_keys_bijective_onto_range():
    # with a window grid sized exactly to the data the keys fill 0..63
    c = dense(4)
    spec = WindowSpec((2, 2, 2))
    wi, iwi, _ = window_keys(c, spec, (4, 4, 4))
    win = np.stack(np.unravel_index(wi, (3, 3, 3)), 1)
    compact = ((win[:, 0] * 2 + win[:, 1]) * 2 + win[:, 2]) * 8 + iwi
    assert sorted(compact.tolist()) == list(range(64))


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8])
def test_keys_injective_exhaustive(n):
    c = dense(n)
    for ext in itertools.product(range(1, 5), repeat=3):
        for axis in ("x", "y"):
            for shift in itertools.product(*(range(e) for e in ext)):
                _, _, k = window_keys(c, WindowSpec(ext, axis, shift), (n, n, n))
                assert len(np.unique(k)) == len(c)


def test_keys_reject_out_of_grid():
    with pytest.raises(ContractError):
        window_keys([[-1, 0, 0]], WindowSpec((2, 2, 2)), (4, 4, 4))
    with pytest.raises(ContractError):
        window_keys([[100, 0, 0]], WindowSpec((2, 2, 2)), (4, 4, 4))


def test_serialize_single_and_empty():
    seq = serialize_voxels([[3, 1, 2]], WindowSpec((2, 2, 2)), (4, 4, 4))
    assert seq.order.tolist() == [0] and seq.inverse.tolist() == [0]
    with pytest.raises(EmptySequenceError):
        serialize_voxels(np.zeros((0, 3), int), WindowSpec((2, 2, 2)), (4, 4, 4))


def _random_voxels(rng, n, grid):
    flat = rng.choice(np.prod(grid), size=n, replace=False)
    return np.stack(np.unravel_index(flat, grid), 1)


def test_sort_matches_comparison_oracle():
    rng = np.random.default_rng(0)
    grid = (20, 17, 9)
    c = _random_voxels(rng, 500, grid)
    for spec in (WindowSpec((4, 3, 2), "x"), WindowSpec((4, 3, 2), "y", (1, 2, 1))):
        seq = serialize_voxels(c, spec, grid)
        keys = [key_oracle(tuple(v), spec.extent, spec.axis, spec.shift, grid)[2] for v in c]
        oracle = sorted(range(len(c)), key=lambda r: keys[r])
        assert seq.order.tolist() == oracle
        assert np.all(np.diff(seq.keys) > 0)
        assert np.array_equal(seq.order[seq.inverse], np.arange(500))
        assert np.array_equal(seq.inverse[seq.order], np.arange(500))


def test_serialization_independent_of_row_order():
    rng = np.random.default_rng(1)
    grid = (12, 12, 12)
    c = _random_voxels(rng, 300, grid)
    spec = WindowSpec((5, 5, 3), "y", (2, 2, 1))
    a = c[rng.permutation(300)]
    b = c[rng.permutation(300)]
    sa, sb = serialize_voxels(a, spec, grid), serialize_voxels(b, spec, grid)
    assert np.array_equal(a[sa.order], b[sb.order])


def test_gather_unserialize_round_trip_and_gradient():
    rng = np.random.default_rng(2)
    grid = (10, 10, 10)
    c = _random_voxels(rng, 64, grid)
    seq = serialize_voxels(c, WindowSpec((3, 3, 3)), grid)
    p = Params()
    p.add("f", rng.normal(size=(64, 5)))
    s = gather(p["f"], seq)
    assert np.array_equal(unserialize(s, seq).data, p["f"].data)
    # loop oracle for the scatter
    expected = np.empty_like(s.data)
    for i in range(64):
        expected[seq.order[i]] = s.data[i]
    assert np.array_equal(unserialize(s, seq).data, expected)
    w = rng.normal(size=(64, 5))
    g = backward(sum_all(unserialize(gather(p["f"], seq), seq) * Tensor(w)), p)["f"]
    assert np.array_equal(g, w)
    with pytest.raises(ContractError):
        unserialize(Tensor(np.zeros((3, 5))), seq)


def test_identity_permutation_passes_through():
    c = np.array([[0, 0, 0], [0, 0, 1], [0, 1, 0]])
    seq = serialize_voxels(c, WindowSpec((2, 2, 2)), (2, 2, 2))
    assert seq.order.tolist() == [0, 1, 2]
    f = Tensor(np.arange(6.0).reshape(3, 2))
    assert np.array_equal(unserialize(f, seq).data, f.data)


@pytest.mark.parametrize("n", [4, 6, 8])
def test_shifted_partition_joins_single_axis_straddlers(n):
    c = dense(n)
    for ext in [(2, 2, 2), (4, 4, 4), (3, 4, 5), (4, 2, 3)]:
        spec = WindowSpec(ext).shifted()
        wi0, _, _ = window_keys(c, spec.unshifted(), (n, n, n))
        wi1, _, _ = window_keys(c, spec, (n, n, n))
        win0 = c // np.array(ext)
        idx = {tuple(v): r for r, v in enumerate(c)}
        for axis in range(3):
            for d in range(1, spec.shift[axis]):
                off = np.zeros(3, int)
                off[axis] = d
                for r, v in enumerate(c):
                    other = idx.get(tuple(v + off))
                    if other is None or win0[r, axis] == win0[other, axis]:
                        continue
                    assert wi0[r] != wi0[other]
                    assert wi1[r] == wi1[other]


def _pair_oracle(c, spec, grid):
    coords = [tuple(v) for v in c]
    present = set(coords)
    pos = {}
    for s in (spec.unshifted(), spec):
        keyed = sorted(coords, key=lambda v: key_oracle(v, s.extent, s.axis, s.shift, grid)[2])
        pos[s.shift] = {v: i for i, v in enumerate(keyed)}
    same0 = same_u = 0
    gaps0, gapsu = [], []
    for v in coords:
        for a in range(3):
            w = list(v)
            w[a] += 1
            w = tuple(w)
            if w not in present:
                continue
            k0 = key_oracle(v, spec.extent, spec.axis, (0, 0, 0), grid)[0] == \
                key_oracle(w, spec.extent, spec.axis, (0, 0, 0), grid)[0]
            k1 = key_oracle(v, spec.extent, spec.axis, spec.shift, grid)[0] == \
                key_oracle(w, spec.extent, spec.axis, spec.shift, grid)[0]
            same0 += k0
            same_u += k0 or k1
            g0 = abs(pos[(0, 0, 0)][v] - pos[(0, 0, 0)][w])
            g1 = abs(pos[spec.shift][v] - pos[spec.shift][w])
            gaps0.append(g0)
            gapsu.append(min(g0, g1))
    n = len(gaps0)
    return same0 / n, same_u / n, float(np.mean(gaps0)), float(np.mean(gapsu)), n


def test_locality_dense_16_cube_exact():
    c = dense(16)
    spec = WindowSpec((4, 4, 4), "x", (2, 2, 2))
    (m,) = locality_report(c, [spec], (16, 16, 16), time_sort=False)
    co, union, gap0, gapu, n = _pair_oracle(c, spec, (16, 16, 16))
    assert n == m.n_pairs == 3 * 15 * 16 * 16
    assert m.co_window == co == pytest.approx(0.8, abs=0)
    assert m.union_co_window == union == 1.0
    assert m.mean_seq_gap == pytest.approx(gap0, abs=1e-12)
    assert m.mean_seq_gap_union == pytest.approx(gapu, abs=1e-12)
    assert m.union_co_window > m.co_window


def test_locality_trivial_cases():
    c = dense(4)
    (m,) = locality_report(c, [WindowSpec((4, 4, 4))], (4, 4, 4), time_sort=False)
    assert m.co_window == 1.0 and m.union_co_window == m.co_window
    rng = np.random.default_rng(3)
    c = _random_voxels(rng, 200, (10, 10, 10))
    (m,) = locality_report(c, [WindowSpec((3, 3, 3))], (10, 10, 10), neighborhood=26)
    assert m.union_co_window == m.co_window
    assert m.voxels_per_sec > 0
    d = m.to_dict()
    assert {"spec", "co_window", "union_co_window", "mean_seq_gap", "voxels_per_sec"} <= set(d)


def test_adjacent_pairs_brute_force():
    rng = np.random.default_rng(4)
    c = _random_voxels(rng, 80, (6, 6, 6))
    for nb in (6, 26):
        i, j = adjacent_pairs(c, nb)
        got = {frozenset((a, b)) for a, b in zip(i.tolist(), j.tolist())}
        exp = set()
        for a in range(80):
            for b in range(a + 1, 80):
                d = np.abs(c[a] - c[b])
                if (nb == 6 and d.sum() == 1) or (nb == 26 and d.max() == 1):
                    exp.add(frozenset((a, b)))
        assert got == exp and len(i) == len(exp)


def test_morton_baseline_runs():
    assert morton_seq_gap(dense(4)) > 0


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    ext=st.tuples(*(st.integers(1, 6) for _ in range(3))),
    axis=st.sampled_from(["x", "y"]),
    n=st.integers(1, 60),
    data=st.data(),
)
def test_serialize_properties(seed, ext, axis, n, data):
    shift = tuple(data.draw(st.integers(0, e - 1)) for e in ext)
    grid = (9, 9, 9)
    rng = np.random.default_rng(seed)
    c = _random_voxels(rng, n, grid)
    spec = WindowSpec(ext, axis, shift)
    seq = serialize_voxels(c, spec, grid)
    assert np.all(np.diff(seq.keys) > 0)
    assert np.array_equal(seq.order[seq.inverse], np.arange(n))
    f = Tensor(rng.normal(size=(n, 2)))
    assert np.array_equal(unserialize(gather(f, seq), seq).data, f.data)
