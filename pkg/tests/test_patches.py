import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jco_mvton import autodiff as ad
from jco_mvton.errors import DimensionError
from jco_mvton.patches import (
    PatchEmbedder,
    embed_patches,
    patchify,
    quantize,
    read_ppm,
    resize_nearest,
    unembed_to_image,
    unpatchify,
    write_ppm,
)


def loop_patchify(img, P):
    c, h, w = img.shape
    out = []
    for r in range(h // P):
        for col in range(w // P):
            block = img[:, r * P:(r + 1) * P, col * P:(col + 1) * P]  # (C, P, P)
            out.append(block.transpose(1, 2, 0).reshape(-1))  # channel fastest
    return np.stack(out)


@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 3))
def test_patchify_matches_loop_and_inverts(gh, gw, P, C):
    img = np.random.default_rng(gh * 31 + gw).standard_normal((C, gh * P, gw * P))
    patches, grid = patchify(img, P)
    assert grid == (gh, gw)
    np.testing.assert_array_equal(patches, loop_patchify(img, P))
    np.testing.assert_array_equal(unpatchify(patches, grid, P, C), img)


def test_patchify_batched_and_tensor(rng):
    img = rng.standard_normal((2, 3, 8, 12))
    p_np, grid = patchify(img, 4)
    p_t, _ = patchify(ad.Tensor(img), 4)
    np.testing.assert_array_equal(p_np, p_t.data)
    np.testing.assert_array_equal(p_np[1], loop_patchify(img[1], 4))
    f = lambda x: ad.sum_(ad.square(patchify(x, 2)[0]))
    assert ad.grad_check(f, rng.standard_normal((1, 4, 4))) < 1e-4


def test_indivisible_image_rejected():
    with pytest.raises(DimensionError):
        patchify(np.zeros((3, 6, 8)), 4)


def test_embedding_is_strided_linear_map(rng):
    emb = PatchEmbedder.init(2, 3, 16, rng)
    assert np.all(emb.bias.data == 0)
    assert np.abs(emb.weight.data).max() <= 1 / np.sqrt(12)
    img = rng.standard_normal((3, 4, 6))
    tokens = embed_patches(patchify(img, 2)[0], emb).data
    # token (r, c) is W . vec(block) + b
    block = img[:, 2:4, 4:6].transpose(1, 2, 0).reshape(-1)
    np.testing.assert_allclose(tokens[1 * 3 + 2], emb.weight.data @ block, atol=1e-12)


def test_pseudo_inverse_decode_recovers_image(rng):
    emb = PatchEmbedder.init(2, 3, 16, rng)
    img = rng.standard_normal((3, 4, 6))
    grid = (2, 3)
    tokens = embed_patches(patchify(img, 2)[0], emb)
    back = unembed_to_image(tokens, grid, 2, 3, np.linalg.pinv(emb.weight.data))
    np.testing.assert_allclose(back.data, img, atol=1e-10)


def test_ppm_roundtrip(tmp_path, rng):
    img = quantize(rng.random((3, 5, 7)))
    write_ppm(tmp_path / "a.ppm", img)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n") and len(raw) == 11 + 3 * 35
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_ppm_with_comment(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# hi\n1 1\n255\n" + bytes([255, 0, 51]))
    np.testing.assert_allclose(read_ppm(tmp_path / "c.ppm")[:, 0, 0], [1.0, 0.0, 0.2])


def test_resize_nearest_index_rule():
    img = np.arange(12.0).reshape(1, 3, 4)
    out = resize_nearest(img, 6, 2)
    np.testing.assert_array_equal(out[0, :, 0], [0, 0, 4, 4, 8, 8])
    np.testing.assert_array_equal(out[0, 0], [0, 2])
