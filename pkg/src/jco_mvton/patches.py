"""Images, PPM files, patchify/unpatchify and the linear patch embedding."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError


def check_image(img: np.ndarray, patch: int | None = None) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3:
        raise DimensionError(f"expected (C, H, W) image, got shape {img.shape}")
    if patch is not None and (img.shape[1] % patch or img.shape[2] % patch):
        raise DimensionError(f"image {img.shape[1]}x{img.shape[2]} not divisible by patch {patch}")
    return img


def grid_dims(height: int, width: int, patch: int) -> tuple[int, int]:
    if height % patch or width % patch:
        raise DimensionError(f"{height}x{width} not divisible by patch {patch}")
    return height // patch, width // patch


def patchify(img, patch: int):
    """Split (..., C, H, W) into (..., N, P*P*C) row-major patches.

    Returns the patches and the (rows, cols) patch grid.  Works on numpy
    arrays and on Tensors (then differentiably).
    """
    shape = img.shape
    if len(shape) < 3:
        raise DimensionError(f"expected (..., C, H, W), got {shape}")
    *lead, c, h, w = shape
    gh, gw = grid_dims(h, w, patch)
    lead = list(lead)
    k = len(lead)
    split = (*lead, c, gh, patch, gw, patch)
    order = (*range(k), k + 1, k + 3, k + 2, k + 4, k)
    flat = (*lead, gh * gw, patch * patch * c)
    if isinstance(img, Tensor):
        out = ad.reshape(ad.transpose(ad.reshape(img, split), order), flat)
    else:
        out = np.asarray(img).reshape(split).transpose(order).reshape(flat)
    return out, (gh, gw)


def unpatchify(patches, grid: tuple[int, int], patch: int, channels: int):
    """Inverse of :func:`patchify`."""
    gh, gw = grid
    *lead, n, width = patches.shape
    if n != gh * gw:
        raise DimensionError(f"{n} tokens do not fill a {gh}x{gw} grid")
    if width != patch * patch * channels:
        raise DimensionError(f"patch width {width} != {patch}*{patch}*{channels}")
    lead = list(lead)
    k = len(lead)
    split = (*lead, gh, gw, patch, patch, channels)
    order = (*range(k), k + 4, k, k + 2, k + 1, k + 3)
    image = (*lead, channels, gh * patch, gw * patch)
    if isinstance(patches, Tensor):
        return ad.reshape(ad.transpose(ad.reshape(patches, split), order), image)
    return np.asarray(patches).reshape(split).transpose(order).reshape(image)


@dataclass
class PatchEmbedder:
    """``x_i = W_emb p_i + b_emb`` with ``W_emb`` of shape (d, P*P*C)."""

    patch: int
    channels: int
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, patch: int, channels: int, dim: int, rng: np.random.Generator, dtype=np.float64):
        fan_in = patch * patch * channels
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(dim, fan_in)).astype(dtype)
        return cls(patch, channels, Tensor(w, requires_grad=True), Tensor(np.zeros(dim, dtype=dtype), requires_grad=True))

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    @property
    def patch_width(self) -> int:
        return self.patch * self.patch * self.channels


def embed_patches(patches, emb: PatchEmbedder) -> Tensor:
    if patches.shape[-1] != emb.patch_width:
        raise DimensionError(f"patch width {patches.shape[-1]} != embedder width {emb.patch_width}")
    if emb.weight.shape[1] != emb.patch_width:
        raise DimensionError("embedder weight does not match its patch geometry")
    return ad.linear(patches, emb.weight, emb.bias)


def unembed_to_image(tokens, grid: tuple[int, int], patch: int, channels: int, w_out) -> Tensor:
    """Map (..., N, d) tokens through ``w_out`` (P*P*C, d) and reassemble pixels.

    Values are not clamped; decoded velocities can be negative.
    """
    gh, gw = grid
    if tokens.shape[-2] != gh * gw:
        raise DimensionError(f"{tokens.shape[-2]} tokens for a {gh}x{gw} grid")
    w_out = ad.as_tensor(w_out)
    if w_out.shape != (patch * patch * channels, tokens.shape[-1]):
        raise DimensionError(f"decode matrix {w_out.shape} incompatible with tokens {tokens.shape}")
    flat = ad.linear(tokens, w_out)
    return unpatchify(flat, grid, patch, channels)


# ----------------------------------------------------------------------------
# file formats


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into a (3, H, W) float64 array in [0, 1]."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P6":
        raise ContractError(f"{path}: only binary P6 PPM is supported")
    width, height, maxval = (int(f) for f in fields[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    pix = np.frombuffer(raw, dtype=dtype, count=width * height * 3, offset=pos)
    img = pix.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / maxval
    return np.clip(img, 0.0, 1.0)


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.nan_to_num(img, nan=0.0), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    img = check_image(img)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    if img.shape[0] != 3:
        raise DimensionError(f"PPM needs 1 or 3 channels, got {img.shape[0]}")
    _, h, w = img.shape
    body = to_bytes(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + body)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit storage, as PPM files do."""
    return to_bytes(img).astype(np.float64) / 255.0


def resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resample of (C, H, W) to (C, height, width)."""
    img = check_image(img)
    _, h, w = img.shape
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return img[:, rows][:, :, cols]
