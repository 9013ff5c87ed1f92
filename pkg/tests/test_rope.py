import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jco_mvton.errors import ContractError
from jco_mvton.rope import PosScheme, RopeConfig, apply_rope, build_positions


def complex_rope(x, coords, head_dim, theta=10000.0):
    """Rotate each feature pair as a complex number."""
    half = head_dim // 2
    freqs = theta ** (-2.0 * np.arange(half // 2) / half)
    z = x[..., 0::2] + 1j * x[..., 1::2]
    ang = np.concatenate([coords[:, :1] * freqs, coords[:, 1:] * freqs], axis=1)
    z = z * np.exp(1j * ang)
    out = np.empty_like(x)
    out[..., 0::2], out[..., 1::2] = z.real, z.imag
    return out


def test_matches_complex_rotation(rng):
    cfg = RopeConfig(16)
    coords = rng.integers(0, 20, size=(7, 2))
    x = rng.standard_normal((2, 7, 16))
    np.testing.assert_allclose(apply_rope(x, coords, cfg).data, complex_rope(x, coords, 16), atol=1e-12)


@given(st.integers(0, 10**6))
def test_relative_score_invariance_and_norm(seed):
    rng = np.random.default_rng(seed)
    cfg = RopeConfig(8)
    q, k = rng.standard_normal((2, 1, 8))
    p, s, shift = rng.integers(-50, 50, size=(3, 2))
    rq = lambda pos, v: apply_rope(v, pos[None], cfg).data[0]
    a = rq(p, q) @ rq(s, k)
    b = rq(p + shift, q) @ rq(s + shift, k)
    assert abs(a - b) < 1e-9
    assert abs(np.linalg.norm(rq(p, q)) - np.linalg.norm(q)) < 1e-9


def test_bad_head_dims():
    with pytest.raises(ContractError):
        RopeConfig(6)
    with pytest.raises(ContractError):
        RopeConfig(7)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.integers(0, 4))
def test_scheme_ii_enumeration(hn, wn, hg, wg, text):
    pos = build_positions("II", (hn, wn), (hn, wn), (hg, wg), text)
    expect_x = [(r, c) for r in range(hn) for c in range(wn)]
    assert [tuple(p) for p in pos.noise] == expect_x
    assert [tuple(p) for p in pos.ref] == expect_x
    assert [tuple(p) for p in pos.garment] == [(r, wn + c) for r in range(hg) for c in range(wg)]
    assert [tuple(p) for p in pos.text] == [(max(hn, hg), c) for c in range(text)]


def test_scheme_i_blocks_disjoint():
    pos = build_positions(PosScheme.I, (3, 2), (3, 2), (2, 2), 2)
    sets = [set(map(tuple, s)) for s in (pos.noise, pos.ref, pos.garment)]
    assert not (sets[0] & sets[1]) and not (sets[1] & sets[2]) and not (sets[0] & sets[2])
    assert min(c for _, c in sets[1]) == 2 and min(c for _, c in sets[2]) == 4


def test_scheme_ii_requires_matching_grids():
    with pytest.raises(ContractError):
        build_positions("II", (3, 2), (2, 2), (2, 2), 1)
