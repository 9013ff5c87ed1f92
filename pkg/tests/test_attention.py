import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jco_mvton import autodiff as ad
from jco_mvton.attention import (
    BranchProjections,
    FlopCounter,
    LoraAdapter,
    Segmentation,
    allowed_pairs,
    apply_lora,
    attention_weights,
    build_mask,
    joint_attention,
    joint_attention_blockskip,
)
from jco_mvton.errors import ContractError
from jco_mvton.rope import RopeConfig, build_positions
from test_rope import complex_rope


def _case(rng, text=2, noise=(2, 3), garment=(2, 2), d=16, heads=2, batch=1):
    n = noise[0] * noise[1]
    seg = Segmentation(text, n, n, garment[0] * garment[1])
    pos = build_positions("II", noise, noise, garment, text)
    proj = BranchProjections.init(d, rng)
    x = rng.standard_normal((batch, seg.total, d))
    return seg, pos, proj, x, heads


def naive_attention(x, seg, proj, coords, heads, masked=True, rope=True):
    """Per-token loop: branch weights by token, explicit -inf blocking."""
    L, d = x.shape
    dk = d // heads
    branch = seg.branch_of()
    names = ["tn", "c1", "c2"]
    W = lambda b, n: proj.weights[names[b]][n].data
    q = np.stack([W(branch[i], "q") @ x[i] for i in range(L)]).reshape(L, heads, dk)
    k = np.stack([W(branch[i], "k") @ x[i] for i in range(L)]).reshape(L, heads, dk)
    v = np.stack([W(branch[i], "v") @ x[i] for i in range(L)]).reshape(L, heads, dk)
    out = np.zeros((L, heads, dk))
    for h in range(heads):
        qh, kh = q[:, h], k[:, h]
        if rope:
            qh, kh = complex_rope(qh, coords, dk), complex_rope(kh, coords, dk)
        for i in range(L):
            s = kh @ qh[i] / np.sqrt(dk)
            if masked:
                blocked = [{branch[i], branch[j]} == {1, 2} for j in range(L)]
                s = np.where(blocked, -np.inf, s)
            w = np.exp(s - s.max())
            out[i, h] = (w / w.sum()) @ v[:, h]
    merged = out.reshape(L, d)
    return np.stack([W(branch[i], "o") @ merged[i] for i in range(L)])


def test_dense_matches_naive_oracle(rng):
    seg, pos, proj, x, heads = _case(rng)
    rope = RopeConfig(8)
    got = joint_attention(x, seg, proj, pos.coords, build_mask(seg), heads, rope).data[0]
    np.testing.assert_allclose(got, naive_attention(x[0], seg, proj, pos.coords, heads), atol=1e-12)
    got = joint_attention(x, seg, proj, pos.coords, None, heads, rope).data[0]
    np.testing.assert_allclose(got, naive_attention(x[0], seg, proj, pos.coords, heads, masked=False), atol=1e-12)


def test_mask_pattern():
    seg = Segmentation(1, 2, 2, 3)
    allowed = allowed_pairs(seg)
    b = seg.branch_of()
    for i in range(seg.total):
        for j in range(seg.total):
            assert allowed[i, j] == ({b[i], b[j]} != {1, 2})


@given(st.integers(0, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10**6))
def test_zero_leak_and_blockskip(text, hn, hg, seed):
    rng = np.random.default_rng(seed)
    seg, pos, proj, x, heads = _case(rng, text=text, noise=(hn, 2), garment=(hg, 2))
    rope = RopeConfig(8)
    w = attention_weights(x, seg, proj, pos.coords, build_mask(seg), heads, rope)
    assert np.all(w[..., ~allowed_pairs(seg)] == 0.0)
    dense_f, skip_f = FlopCounter(), FlopCounter()
    a = joint_attention(x, seg, proj, pos.coords, build_mask(seg), heads, rope, dense_f).data
    b = joint_attention_blockskip(x, seg, proj, pos.coords, heads, rope, skip_f).data
    assert np.max(np.abs(a - b)) < 1e-12
    saved = dense_f["qk_scores"] - skip_f["qk_scores"]
    assert saved == heads * 2 * seg.ref * seg.garment * 8 == skip_f["skipped_qk_scores"]


def test_blockskip_gradients_match_dense(rng):
    seg, pos, proj, x, heads = _case(rng)
    rope = RopeConfig(8)
    g = rng.standard_normal(x.shape)
    grads = []
    for fn in (lambda t: joint_attention(t, seg, proj, pos.coords, build_mask(seg), heads, rope),
               lambda t: joint_attention_blockskip(t, seg, proj, pos.coords, heads, rope)):
        t = ad.Tensor(x, requires_grad=True)
        fn(t).backward(g)
        grads.append(t.grad)
    np.testing.assert_allclose(grads[0], grads[1], atol=1e-12)


def test_attention_grad_check(rng):
    seg, pos, proj, x, heads = _case(rng, text=1, noise=(1, 2), garment=(1, 2))
    rope = RopeConfig(8)
    f = lambda t: ad.sum_(ad.square(joint_attention_blockskip(t, seg, proj, pos.coords, heads, rope)))
    assert ad.grad_check(f, x) < 1e-4


def test_lora_zero_init_and_merge(rng):
    base = rng.standard_normal((6, 5))
    lora = LoraAdapter.init(6, 5, 2, 4.0, rng)
    z = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(apply_lora(base, lora, z).data, ad.linear(z, base).data)
    lora.B = ad.Tensor(rng.standard_normal((6, 2)), requires_grad=True)
    merged = base + 2.0 * lora.B.data @ lora.A.data
    np.testing.assert_allclose(apply_lora(base, lora, z).data, z @ merged.T, atol=1e-12)
    assert lora.n_params == 2 * (6 + 5)


def test_lora_rank_bounds(rng):
    with pytest.raises(ContractError):
        LoraAdapter.init(4, 3, 4, None, rng)


def test_sequence_length_mismatch(rng):
    seg, pos, proj, x, heads = _case(rng)
    with pytest.raises(ContractError):
        joint_attention_blockskip(x[:, :-1], seg, proj, pos.coords[:-1], heads)
