"""Synthetic try-on triplets and a small curation pipeline around them.

Every sample is built so that ``R == composite(P, G, region)`` holds exactly,
which makes the garment/person consistency scorers exact oracles.  All pixel
values are multiples of 1/255, so PPM storage is lossless.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError
from .metrics import ssim, ssim_map
from .patches import read_ppm, resize_nearest, write_ppm

log = logging.getLogger(__name__)

PERSON_HW = (32, 24)
GARMENT_HW = (16, 16)
PROVENANCE = ("stage1", "regenerated", "style_expanded")

PALETTE = np.array(
    [
        [230, 57, 70], [29, 53, 87], [69, 123, 157], [241, 250, 238],
        [244, 162, 97], [42, 157, 143], [233, 196, 106], [38, 70, 83],
        [131, 56, 236], [255, 190, 11], [58, 134, 255], [6, 214, 160],
    ],
    dtype=np.int64,
)
SKIN = np.array([[224, 172, 105], [198, 134, 66], [141, 85, 36], [255, 219, 172]], dtype=np.int64)


def _from_bytes(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(img) * 255.0).astype(np.int64)


@dataclass(frozen=True)
class Region:
    x: int
    y: int
    w: int
    h: int

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    def check(self, height: int, width: int) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ContractError(f"empty region {self}")
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise ContractError(f"region {self} outside a {height}x{width} image")

    def slices(self):
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)


def composite(person: np.ndarray, garment: np.ndarray, region: Region) -> np.ndarray:
    """Paste ``garment`` (nearest-neighbour resampled) into ``region`` of ``person``."""
    region.check(*person.shape[1:])
    out = np.array(person, copy=True)
    rs, cs = region.slices()
    out[:, rs, cs] = resize_nearest(garment, region.h, region.w)
    return out


@dataclass
class TripletSample:
    garment: np.ndarray
    person: np.ndarray
    reference: np.ndarray
    region: Region
    seed: int


@dataclass
class PoolRecord:
    id: int
    sample: TripletSample
    scores: dict[str, float] = field(default_factory=dict)
    round: int = 0
    provenance: str = "stage1"
    flagged: bool = False

    def index_entry(self) -> dict:
        return {
            "id": self.id,
            "seed": self.sample.seed,
            "region": self.sample.region.as_list(),
            "scores": {k: float(self.scores[k]) for k in ("g", "p", "r")},
            "provenance": self.provenance,
            "round": self.round,
        }


# ----------------------------------------------------------------------------
# procedural generation


def _garment(rng: np.random.Generator) -> np.ndarray:
    h, w = GARMENT_HW
    a, b = rng.choice(len(PALETTE), size=2, replace=False)
    ca, cb = PALETTE[a], PALETTE[b]
    kind = rng.integers(0, 4)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    width = int(rng.integers(2, 5))
    if kind == 0:
        sel = np.zeros((h, w), dtype=bool)
    elif kind == 1:
        sel = (rows // width) % 2 == 1
    elif kind == 2:
        sel = (cols // width) % 2 == 1
    else:
        sel = ((rows // width) + (cols // width)) % 2 == 1
    img = np.where(sel[None], cb[:, None, None], ca[:, None, None])
    return _from_bytes(img)


def _person(rng: np.random.Generator) -> tuple[np.ndarray, Region]:
    h, w = PERSON_HW
    top, bottom = PALETTE[rng.choice(len(PALETTE), size=2, replace=False)]
    ramp = np.arange(h)[None, :] / (h - 1)
    bg = np.round(top[:, None] * (1 - ramp) + bottom[:, None] * ramp).astype(np.int64)
    img = np.repeat(bg[:, :, None], w, axis=2)
    skin = SKIN[rng.integers(len(SKIN))]
    shirt, trousers = PALETTE[rng.choice(len(PALETTE), size=2, replace=False)]

    tw = int(rng.integers(10, 15))
    th = int(rng.integers(11, 15))
    tx = int(rng.integers(4, w - tw - 3))
    ty = int(rng.integers(7, 10))
    hx = tx + tw // 2 - 3
    img[:, ty - 6 : ty - 1, hx : hx + 6] = skin[:, None, None]
    img[:, ty - 1 : ty, hx + 2 : hx + 4] = skin[:, None, None]
    img[:, ty : ty + th - 2, tx - 3 : tx] = skin[:, None, None]
    img[:, ty : ty + th - 2, tx + tw : tx + tw + 3] = skin[:, None, None]
    img[:, ty : ty + th, tx : tx + tw] = shirt[:, None, None]
    legs_y = ty + th
    img[:, legs_y:h, tx + 1 : tx + tw // 2] = trousers[:, None, None]
    img[:, legs_y:h, tx + tw // 2 + 1 : tx + tw - 1] = trousers[:, None, None]
    return _from_bytes(img), Region(tx, ty, tw, th)


def gen_triplet(seed: int) -> TripletSample:
    """Deterministic (garment, person, reference) triplet for ``seed``."""
    rng = np.random.default_rng([7919, int(seed)])
    person, region = _person(rng)
    garment = _garment(rng)
    return TripletSample(garment, person, composite(person, garment, region), region, int(seed))


def tryoff_oracle(reference: np.ndarray, region: Region, garment_hw=GARMENT_HW) -> np.ndarray:
    """Cut the worn region out of ``reference`` and resample it to a garment canvas."""
    region.check(*reference.shape[1:])
    rs, cs = region.slices()
    return resize_nearest(reference[:, rs, cs], *garment_hw)


# ----------------------------------------------------------------------------
# scoring and filtering


def isolated_pixel_fraction(img: np.ndarray, margin: float = 0.1) -> float:
    """Fraction of pixels brighter (or darker) than all 8 neighbours by ``margin``.

    The generator never produces such single-pixel speckles, so this is a
    high-frequency noise detector with zero false positives on clean data.
    """
    x = np.pad(np.asarray(img, dtype=np.float64), ((0, 0), (1, 1), (1, 1)), mode="edge")
    c = x[:, 1:-1, 1:-1]
    h, w = c.shape[1:]
    lo = np.full(c.shape, np.inf)
    hi = np.full(c.shape, -np.inf)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == dx == 0:
                continue
            n = x[:, 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            lo = np.minimum(lo, n)
            hi = np.maximum(hi, n)
    speck = (c > hi + margin) | (c < lo - margin)
    return float(np.mean(speck.any(axis=0)))


def realism_score(img: np.ndarray) -> tuple[float, bool]:
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        return 0.0, True
    out_of_range = float(np.mean((img < 0) | (img > 1)))
    penalty = out_of_range + 4.0 * isolated_pixel_fraction(np.clip(img, 0, 1))
    return 1.0 - min(1.0, penalty), False


def person_consistency(reference: np.ndarray, person: np.ndarray, region: Region) -> float:
    """Mean SSIM over windows that lie entirely outside ``region``."""
    smap = ssim_map(reference, person)
    w = person.shape[1] - smap.shape[1] + 1
    ys = np.arange(smap.shape[1])
    xs = np.arange(smap.shape[2])
    miss_y = (ys[:, None] + w <= region.y) | (ys[:, None] >= region.y + region.h)
    miss_x = (xs[None, :] + w <= region.x) | (xs[None, :] >= region.x + region.w)
    keep = miss_y | miss_x
    if not keep.any():
        return 1.0
    return float(smap[:, keep].mean())


def score_triplet(s: TripletSample) -> tuple[dict[str, float], bool]:
    """Scores ``{"g", "p", "r"}`` in [0, 1] plus a flag for corrupt pixels."""
    r, flagged = realism_score(s.reference)
    if flagged:
        return {"g": 0.0, "p": 0.0, "r": 0.0}, True
    rs, cs = s.region.slices()
    worn = s.reference[:, rs, cs]
    expected = resize_nearest(s.garment, s.region.h, s.region.w)
    g = max(0.0, ssim(worn, expected))
    p = max(0.0, person_consistency(s.reference, s.person, s.region))
    return {"g": float(g), "p": float(p), "r": float(r)}, False


def score_record(rec: PoolRecord) -> PoolRecord:
    scores, flagged = score_triplet(rec.sample)
    return replace(rec, scores=scores, flagged=flagged)


@dataclass
class FilterReport:
    kept: int
    total: int
    rejected: dict[str, int]

    def as_dict(self) -> dict:
        return {"kept": self.kept, "total": self.total, "rejected": dict(self.rejected)}


def filter_pool(pool: list[PoolRecord], thresholds) -> tuple[list[PoolRecord], FilterReport]:
    """Keep records whose three scores all clear their thresholds, in order."""
    tg, tp, tr = thresholds
    rejected = {"g": 0, "p": 0, "r": 0}
    kept = []
    for rec in pool:
        if not rec.scores:
            raise ContractError(f"record {rec.id} has not been scored")
        ok = True
        for key, bar in (("g", tg), ("p", tp), ("r", tr)):
            if rec.scores[key] < bar:
                rejected[key] += 1
                ok = False
        if ok:
            kept.append(rec)
    return kept, FilterReport(len(kept), len(pool), rejected)


# ----------------------------------------------------------------------------
# pool construction and augmentation


def stage1_pool(seed: int, count: int) -> list[PoolRecord]:
    """Oracle triplets for seeds ``seed .. seed + count - 1``, already scored."""
    pool = []
    for i in range(count):
        rec = PoolRecord(id=i, sample=gen_triplet(seed + i), round=0, provenance="stage1")
        pool.append(score_record(rec))
    return pool


def corrupt(sample: TripletSample, rng: np.random.Generator, sigma: float = 0.1) -> TripletSample:
    """Add Gaussian noise inside the worn region (a bad try-on result)."""
    ref = np.array(sample.reference, copy=True)
    rs, cs = sample.region.slices()
    ref[:, rs, cs] = np.clip(ref[:, rs, cs] + rng.normal(0, sigma, ref[:, rs, cs].shape), 0, 1)
    return replace(sample, reference=ref)


def _recolor(img: np.ndarray, perm: np.ndarray, invert: np.ndarray, shift: int) -> np.ndarray:
    k = _to_bytes(img)[perm]
    k = np.where(invert[:, None, None], 255 - k, k)
    k = np.clip(k + shift, 0, 255)
    return _from_bytes(k)


def style_expand(pool: list[PoolRecord], n: int, seed: int) -> list[PoolRecord]:
    """Append ``n`` recoloured / pattern-shifted variants of pool members.

    Person and garment are transformed separately and the reference is
    recomposited, so the oracle identity survives.
    """
    if n == 0 or not pool:
        return list(pool)
    rng = np.random.default_rng([104729, int(seed)])
    out = list(pool)
    next_id = max(r.id for r in pool) + 1
    for j in range(n):
        src = pool[int(rng.integers(len(pool)))].sample
        perm = rng.permutation(3)
        invert = rng.random(3) < 0.5
        shift = int(rng.integers(-40, 41))
        garment = _recolor(src.garment, perm, invert, shift)
        garment = np.roll(garment, int(rng.integers(0, GARMENT_HW[1])), axis=2)
        person = _recolor(src.person, rng.permutation(3), rng.random(3) < 0.5, 0)
        sample = TripletSample(garment, person, composite(person, garment, src.region), src.region, src.seed)
        rec = PoolRecord(id=next_id + j, sample=sample, round=0, provenance="style_expanded")
        out.append(score_record(rec))
    return out


def palette_histogram(pool: Iterable[PoolRecord], bins: int = 8) -> np.ndarray:
    """Joint RGB histogram (bins**3) of all garment pixels."""
    counts = np.zeros(bins**3, dtype=np.int64)
    for rec in pool:
        q = np.minimum((_to_bytes(rec.sample.garment) * bins) // 256, bins - 1)
        idx = (q[0] * bins + q[1]) * bins + q[2]
        counts += np.bincount(idx.ravel(), minlength=bins**3)
    return counts


def chi_squared(h1: np.ndarray, h2: np.ndarray) -> float:
    p = h1 / max(h1.sum(), 1)
    q = h2 / max(h2.sum(), 1)
    denom = p + q
    nz = denom > 0
    return float(np.sum((p[nz] - q[nz]) ** 2 / denom[nz]))


# ----------------------------------------------------------------------------
# bootstrapping with a generator in the loop

Generator = Callable[[TripletSample, int], np.ndarray]


@dataclass
class RoundReport:
    round: int
    attempted: int
    failed: int
    retained: int
    retention_rate: float
    mean_scores: dict[str, float]
    rejected: dict[str, int]

    def as_dict(self) -> dict:
        return {
            "round": self.round,
            "attempted": self.attempted,
            "failed": self.failed,
            "retained": self.retained,
            "retention_rate": self.retention_rate,
            "mean_scores": self.mean_scores,
            "rejected": self.rejected,
        }


def bootstrap_round(pool: list[PoolRecord], generator: Generator, thresholds, round_index: int,
                    seed: int = 0) -> tuple[list[PoolRecord], RoundReport]:
    """Regenerate R for every retained source pair, rescore, filter and merge.

    Source pairs are the non-regenerated records that pass ``thresholds``.
    ``generator(sample, seed)`` must return a reference image for the
    sample's person and garment; failures drop that item only.
    """
    sources, _ = filter_pool([r for r in pool if r.provenance != "regenerated"], thresholds)
    next_id = max((r.id for r in pool), default=-1) + 1
    fresh: list[PoolRecord] = []
    failed = 0
    for rec in sources:
        item_seed = int(np.random.default_rng([seed, round_index, rec.id]).integers(2**31))
        try:
            ref = np.asarray(generator(rec.sample, item_seed), dtype=np.float64)
            if ref.shape != rec.sample.person.shape:
                raise ContractError(f"generator returned shape {ref.shape}")
        except Exception as exc:  # an item failure must not end the round
            log.warning("round %d: regeneration of record %d failed: %s", round_index, rec.id, exc)
            failed += 1
            continue
        sample = replace(rec.sample, reference=ref)
        new = PoolRecord(id=next_id + len(fresh) + failed, sample=sample, round=round_index,
                         provenance="regenerated")
        fresh.append(score_record(new))
    kept, report = filter_pool(fresh, thresholds)
    means = {k: float(np.mean([r.scores[k] for r in fresh])) if fresh else 0.0 for k in ("g", "p", "r")}
    attempted = len(sources)
    rr = RoundReport(round_index, attempted, failed, len(kept),
                     len(kept) / attempted if attempted else 0.0, means, report.rejected)
    return list(pool) + kept, rr


def oracle_generator(sample: TripletSample, seed: int) -> np.ndarray:
    """A perfect try-on model: returns the exact composite."""
    return composite(sample.person, sample.garment, sample.region)


# ----------------------------------------------------------------------------
# persistence


def save_pool(pool: list[PoolRecord], directory) -> None:
    """``index.json`` plus ``NNNNN_{G,P,R}.ppm`` per record."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in pool:
        stem = f"{rec.id:05d}"
        write_ppm(directory / f"{stem}_G.ppm", rec.sample.garment)
        write_ppm(directory / f"{stem}_P.ppm", rec.sample.person)
        write_ppm(directory / f"{stem}_R.ppm", rec.sample.reference)
    index = [rec.index_entry() for rec in pool]
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_pool(directory) -> list[PoolRecord]:
    directory = Path(directory)
    idx_path = directory / "index.json"
    if not idx_path.exists():
        raise ContractError(f"{directory}: missing index.json")
    pool = []
    for entry in json.loads(idx_path.read_text()):
        stem = f"{entry['id']:05d}"
        sample = TripletSample(
            garment=read_ppm(directory / f"{stem}_G.ppm"),
            person=read_ppm(directory / f"{stem}_P.ppm"),
            reference=read_ppm(directory / f"{stem}_R.ppm"),
            region=Region(*entry["region"]),
            seed=int(entry["seed"]),
        )
        pool.append(PoolRecord(entry["id"], sample, dict(entry["scores"]), entry.get("round", 0),
                               entry["provenance"]))
    return pool


def find_round_dir(directory) -> Path:
    """Accept either a round directory or a dataset root holding ``round_k`` dirs."""
    directory = Path(directory)
    if (directory / "index.json").exists():
        return directory
    rounds = sorted(directory.glob("round_*"), key=lambda p: int(p.name.split("_")[1]))
    if not rounds:
        raise ContractError(f"{directory}: no index.json or round_* directories")
    return rounds[-1]
