"""Axial 2D rotary embeddings."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilessl.nn_core import ConfigError
from tilessl.rope2d import DEFAULT_BASE, apply_rope, build_rope_table, grid_rope, rotate


def loop_angles(grid_h, grid_w, head_dim, base):
    pairs = head_dim // 2
    quarter = head_dim // 4
    out = np.zeros((grid_h, grid_w, pairs))
    for r in range(grid_h):
        for c in range(grid_w):
            for i in range(quarter):
                f = base ** (-2.0 * i / (head_dim / 2))
                out[r, c, i] = r * f
                out[r, c, quarter + i] = c * f
    return out


def test_single_cell_all_zero():
    t = build_rope_table(1, 1, 8)
    assert np.all(t.angles == 0)


def test_angles_match_scalar_loop():
    t = build_rope_table(2, 2, 4, 100.0)
    np.testing.assert_allclose(t.angles, loop_angles(2, 2, 4, 100.0), rtol=0, atol=1e-15)


@pytest.mark.parametrize("shape", [(3, 5, 8), (4, 4, 16), (2, 7, 12)])
def test_angles_match_scalar_loop_shapes(shape):
    t = build_rope_table(*shape, base=DEFAULT_BASE)
    np.testing.assert_allclose(t.angles, loop_angles(*shape, DEFAULT_BASE), rtol=0, atol=1e-13)


def test_origin_angles_zero():
    assert np.all(build_rope_table(5, 6, 16).angles[0, 0] == 0)


def test_doubling_width_keeps_row_angles():
    a = build_rope_table(3, 4, 8).angles
    b = build_rope_table(3, 8, 8).angles
    np.testing.assert_array_equal(a[:, :, :2], b[:, :4, :2])
    np.testing.assert_array_equal(a, b[:, :4])  # shared positions unchanged


@pytest.mark.parametrize("args", [(2, 2, 6, 100.0), (0, 2, 8, 100.0), (2, 2, 8, 1.0)])
def test_bad_config(args):
    with pytest.raises(ConfigError):
        build_rope_table(*args)


def test_identity_at_origin(rng):
    v = rng.normal(size=(1, 8))
    np.testing.assert_array_equal(apply_rope(v, build_rope_table(4, 4, 8), [(0, 0)]), v)


def test_out_of_grid_position(rng):
    with pytest.raises(ValueError):
        apply_rope(rng.normal(size=(1, 8)), build_rope_table(4, 4, 8), [(4, 0)])


def test_head_dim_mismatch(rng):
    with pytest.raises(ValueError):
        apply_rope(rng.normal(size=(1, 12)), build_rope_table(4, 4, 8), [(0, 0)])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 2**31 - 1))
def test_norm_preserved(r, c, seed):
    v = np.random.default_rng(seed).normal(size=(3, 16)) * 10
    out = apply_rope(v, build_rope_table(6, 6, 16), [(r, c)] * 3)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(v, axis=-1), rtol=1e-12, atol=1e-6)


def test_relative_shift_invariance_exhaustive():
    """<q@p1, k@p2> is unchanged by any common shift keeping both in the 4x4 grid."""
    rng = np.random.default_rng(0)
    g, d = 4, 8
    table = build_rope_table(g, g, d)
    q, k = rng.normal(size=(1, d)), rng.normal(size=(1, d))
    cells = list(itertools.product(range(g), range(g)))
    rq = {p: apply_rope(q, table, [p])[0] for p in cells}
    rk = {p: apply_rope(k, table, [p])[0] for p in cells}
    checked = 0
    for p1, p2 in itertools.product(cells, cells):
        ref = rq[p1] @ rk[p2]
        for dr, dc in itertools.product(range(-g + 1, g), repeat=2):
            s1, s2 = (p1[0] + dr, p1[1] + dc), (p2[0] + dr, p2[1] + dc)
            if s1 in rq and s2 in rk:
                assert abs(rq[s1] @ rk[s2] - ref) < 1e-6
                checked += 1
    assert checked > 1000


def test_dot_product_depends_on_offset_only_closed_form():
    # q rotated by a, k by b: dot equals q . R(b - a) k per pair
    rng = np.random.default_rng(3)
    q, k = rng.normal(size=4), rng.normal(size=4)
    table = build_rope_table(4, 4, 4)
    a = table.position_angles([(1, 2)])[0]
    b = table.position_angles([(3, 0)])[0]
    lhs = apply_rope(q[None], table, [(1, 2)])[0] @ apply_rope(k[None], table, [(3, 0)])[0]
    rhs = 0.0
    for j in range(2):
        t = b[j] - a[j]
        k0, k1 = k[2 * j], k[2 * j + 1]
        rhs += q[2 * j] * (k0 * math.cos(t) - k1 * math.sin(t)) + q[2 * j + 1] * (k0 * math.sin(t) + k1 * math.cos(t))
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_inverse_rotation(rng):
    table = build_rope_table(3, 3, 8)
    fwd, inv = grid_rope(table)
    v = rng.normal(size=(2, 9, 8))
    np.testing.assert_allclose(inv(fwd(v)), v, atol=1e-14)
    angles = table.grid_angles()
    np.testing.assert_allclose(rotate(v, angles, inverse=True), inv(v))
