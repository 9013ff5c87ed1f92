"""The toy try-on network: embedders, joint blocks, time conditioning, decode.

Each block is pre-norm with time-dependent shift/scale applied to every
token, followed by the joint three-branch attention and a gated MLP shared
by all tokens.  Only the noise span is decoded back to pixels.

Images enter the network in latent form ``2 * img - 1``.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import (
    BRANCHES,
    PROJ_NAMES,
    BranchProjections,
    FlopCounter,
    LoraAdapter,
    Segmentation,
    build_mask,
    joint_attention,
    joint_attention_blockskip,
)
from .autodiff import Tensor
from .errors import ContractError, DimensionError, NonFiniteError
from .flow import Parameterization, RfConfig, rf_interpolate, rf_target
from .patches import PatchEmbedder, embed_patches, grid_dims, patchify, unembed_to_image
from .rope import PosScheme, RopeConfig, build_positions

CHECKPOINT_FORMAT = "jco-mvton-checkpoint/1"
POLICIES = ("full", "conditional_only", "conditional_lora", "backbone")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    blocks: int = 4
    patch: int = 4
    channels: int = 3
    noise_hw: tuple[int, int] = (32, 24)
    garment_hw: tuple[int, int] = (16, 16)
    text_len: int = 4
    mlp_ratio: int = 2
    rope_theta: float = 10000.0
    pos_scheme: str = "II"
    mask_enabled: bool = True
    attention: str = "blockskip"
    lora_rank: int = 0
    lora_alpha: float | None = None
    dtype: str = "float32"
    init_seed: int = 0
    rf: RfConfig = field(default_factory=RfConfig)

    def __post_init__(self):
        object.__setattr__(self, "noise_hw", tuple(self.noise_hw))
        object.__setattr__(self, "garment_hw", tuple(self.garment_hw))
        if isinstance(self.rf, dict):
            object.__setattr__(self, "rf", RfConfig(**self.rf))
        PosScheme(self.pos_scheme)
        if self.attention not in ("dense", "blockskip"):
            raise ContractError(f"unknown attention kernel {self.attention!r}")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        RopeConfig(self.dim // self.heads, self.rope_theta)
        grid_dims(*self.noise_hw, self.patch)
        grid_dims(*self.garment_hw, self.patch)
        if self.lora_rank < 0 or self.lora_rank > self.dim:
            raise ContractError(f"lora_rank {self.lora_rank} outside [0, {self.dim}]")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, self.rope_theta)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_hw"] = list(self.noise_hw)
        d["garment_hw"] = list(self.garment_hw)
        d["rf"] = {
            "parameterization": self.rf.parameterization.value,
            "t_max": self.rf.t_max,
            "sampler_steps": self.rf.sampler_steps,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "rf" in d and isinstance(d["rf"], dict):
            rf_unknown = set(d["rf"]) - set(RfConfig.__dataclass_fields__)
            if rf_unknown:
                raise ContractError(f"unknown rf config keys: {sorted(rf_unknown)}")
            d["rf"] = RfConfig(**d["rf"])
        return cls(**d)

    def architecture(self) -> tuple:
        return (self.dim, self.heads, self.blocks, self.patch, self.channels, self.text_len,
                self.mlp_ratio, self.lora_rank)


def to_latent(img):
    return 2.0 * np.asarray(img) - 1.0


def from_latent(x):
    return (np.asarray(x) + 1.0) / 2.0


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features of ``1000 * t``, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def _uniform(rng, shape, fan_in, dtype, gain=1.0):
    bound = gain / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class JCoModel:
    """Parameters live in ``self.params`` (name -> Tensor), all trainable at init."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else self._init_params()
        self.policy = "full"

    def _init_params(self) -> dict[str, Tensor]:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.init_seed)
        dt = cfg.np_dtype
        d = cfg.dim
        pw = cfg.patch * cfg.patch * cfg.channels
        hidden = cfg.mlp_ratio * d
        p: dict[str, Tensor] = {}
        emb = PatchEmbedder.init(cfg.patch, cfg.channels, d, rng, dt)
        p["embed.weight"], p["embed.bias"] = emb.weight, emb.bias
        p["prompt"] = Tensor(rng.normal(0.0, 0.5, size=(cfg.text_len, d)).astype(dt), requires_grad=True)
        p["time.fc1.weight"] = _uniform(rng, (d, d), d, dt)
        p["time.fc1.bias"] = Tensor(np.zeros(d, dt), requires_grad=True)
        p["time.fc2.weight"] = _uniform(rng, (cfg.blocks * 4 * d, d), d, dt, gain=0.1)
        p["time.fc2.bias"] = Tensor(np.zeros(cfg.blocks * 4 * d, dt), requires_grad=True)
        for i in range(cfg.blocks):
            pre = f"blocks.{i}"
            p[f"{pre}.norm1.gain"] = Tensor(np.ones(d, dt), requires_grad=True)
            p[f"{pre}.norm2.gain"] = Tensor(np.ones(d, dt), requires_grad=True)
            for branch in BRANCHES:
                for name in PROJ_NAMES:
                    p[f"{pre}.attn.{branch}.{name}"] = _uniform(rng, (d, d), d, dt)
            p[f"{pre}.mlp.w1"] = _uniform(rng, (hidden, d), d, dt)
            p[f"{pre}.mlp.w3"] = _uniform(rng, (hidden, d), d, dt)
            p[f"{pre}.mlp.w2"] = _uniform(rng, (d, hidden), hidden, dt)
            if cfg.lora_rank:
                for branch in ("c1", "c2"):
                    for name in PROJ_NAMES:
                        lora = LoraAdapter.init(d, d, cfg.lora_rank, cfg.lora_alpha, rng, dt)
                        p[f"{pre}.attn.{branch}.{name}.lora_A"] = lora.A
                        p[f"{pre}.attn.{branch}.{name}.lora_B"] = lora.B
        p["final_norm.gain"] = Tensor(np.ones(d, dt), requires_grad=True)
        p["decode.weight"] = Tensor(np.zeros((pw, d), dt), requires_grad=True)
        self._branch_copy(p)
        return p

    @staticmethod
    def _branch_copy(p: dict[str, Tensor]) -> None:
        for name in list(p):
            m = re.fullmatch(r"(blocks\.\d+\.attn)\.tn\.([qkvo])", name)
            if m:
                for branch in ("c1", "c2"):
                    p[f"{m[1]}.{branch}.{m[2]}"] = Tensor(p[name].data, requires_grad=True)

    # ------------------------------------------------------------------
    # parameter groups

    def names(self, group: str) -> list[str]:
        lora = [n for n in self.params if n.endswith((".lora_A", ".lora_B"))]
        cond = [n for n in self.params if re.fullmatch(r"blocks\.\d+\.attn\.c[12]\.[qkvo]", n)]
        if group == "lora":
            return lora
        if group == "conditional":
            return cond
        if group == "backbone":
            return [n for n in self.params if n not in set(lora) | set(cond)]
        raise ContractError(f"unknown parameter group {group!r}")

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def n_trainable(self) -> int:
        return int(sum(t.data.size for t in self.trainable().values()))

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def projections(self, block: int, single_branch: bool = False) -> BranchProjections:
        pre = f"blocks.{block}.attn"
        weights = {}
        for branch in BRANCHES:
            src = "tn" if single_branch else branch
            weights[branch] = {n: self.params[f"{pre}.{src}.{n}"] for n in PROJ_NAMES}
        lora: dict[str, dict[str, LoraAdapter]] = {}
        if self.cfg.lora_rank and not single_branch:
            r = self.cfg.lora_rank
            alpha = float(r if self.cfg.lora_alpha is None else self.cfg.lora_alpha)
            for branch in ("c1", "c2"):
                lora[branch] = {
                    n: LoraAdapter(r, alpha, self.params[f"{pre}.{branch}.{n}.lora_A"],
                                   self.params[f"{pre}.{branch}.{n}.lora_B"])
                    for n in PROJ_NAMES
                }
        return BranchProjections(weights, lora)

    # ------------------------------------------------------------------
    # forward

    def segmentation(self, noise_hw, ref_hw, garment_hw) -> Segmentation:
        P = self.cfg.patch
        n = int(np.prod(grid_dims(*noise_hw, P)))
        r = int(np.prod(grid_dims(*ref_hw, P))) if ref_hw is not None else 0
        g = int(np.prod(grid_dims(*garment_hw, P))) if garment_hw is not None else 0
        return Segmentation(self.cfg.text_len, n, r, g)

    def positions(self, noise_hw, ref_hw, garment_hw):
        P = self.cfg.patch
        ng = grid_dims(*noise_hw, P)
        rg = grid_dims(*ref_hw, P) if ref_hw is not None else ng
        gg = grid_dims(*garment_hw, P) if garment_hw is not None else (0, 0)
        pos = build_positions(self.cfg.pos_scheme, ng, rg, gg, self.cfg.text_len)
        if ref_hw is None:
            pos = replace(pos, ref=pos.ref[:0])
        return pos

    def forward(self, noisy, ref, garment, t, flops: FlopCounter | None = None,
                single_branch: bool = False) -> Tensor:
        """Predicted velocity for latent images (B, C, H, W); unbatched inputs allowed.

        ``ref`` or ``garment`` may be None, which drops that segment.
        """
        cfg = self.cfg
        dt = cfg.np_dtype
        noisy = np.asarray(noisy, dtype=dt)
        batched = noisy.ndim == 4
        if not batched:
            noisy = noisy[None]
            ref = None if ref is None else np.asarray(ref)[None]
            garment = None if garment is None else np.asarray(garment)[None]
        if noisy.ndim != 4 or noisy.shape[1] != cfg.channels:
            raise DimensionError(f"noisy input shape {noisy.shape} incompatible with {cfg.channels} channels")
        B = noisy.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (B,))
        if np.any(t < 0) or np.any(t > 1):
            raise ContractError("t must lie in [0, 1]")
        for name, img in (("ref", ref), ("garment", garment)):
            if img is not None and (np.ndim(img) != 4 or np.shape(img)[0] != B or np.shape(img)[1] != cfg.channels):
                raise DimensionError(f"{name} shape {np.shape(img)} does not match batch/channels")
        noise_hw = noisy.shape[2:]
        ref_hw = None if ref is None else ref.shape[2:]
        garment_hw = None if garment is None else garment.shape[2:]
        if cfg.pos_scheme == "II" and ref_hw is not None and tuple(ref_hw) != tuple(noise_hw):
            raise ContractError(f"scheme II needs reference dims {tuple(ref_hw)} == noise dims {tuple(noise_hw)}")
        seg = self.segmentation(noise_hw, ref_hw, garment_hw)
        pos = self.positions(noise_hw, ref_hw, garment_hw)

        p = self.params
        emb = PatchEmbedder(cfg.patch, cfg.channels, p["embed.weight"], p["embed.bias"])
        xp, grid = patchify(noisy, cfg.patch)
        parts = [ad.add(np.zeros((B, cfg.text_len, cfg.dim), dt), p["prompt"]), embed_patches(xp, emb)]
        for img in (ref, garment):
            if img is not None:
                parts.append(embed_patches(patchify(np.asarray(img, dtype=dt), cfg.patch)[0], emb))
        h = ad.concat(parts, axis=1)

        temb = Tensor(timestep_embedding(t, cfg.dim).astype(dt))
        hid = ad.silu(ad.linear(temb, p["time.fc1.weight"], p["time.fc1.bias"]))
        mod = ad.linear(hid, p["time.fc2.weight"], p["time.fc2.bias"])
        mod = ad.reshape(mod, (B, cfg.blocks * 4, 1, cfg.dim))

        mask = build_mask(seg, dt) if cfg.mask_enabled else None
        skip = cfg.mask_enabled and cfg.attention == "blockskip"
        for i in range(cfg.blocks):
            pre = f"blocks.{i}"
            shift1, scale1, shift2, scale2 = (
                ad.reshape(ad.slice_(mod, 4 * i + j, 4 * i + j + 1, axis=1), (B, 1, cfg.dim)) for j in range(4)
            )
            x = ad.rms_norm(h, p[f"{pre}.norm1.gain"])
            x = ad.add(ad.add(x, ad.mul(x, scale1)), shift1)
            proj = self.projections(i, single_branch)
            if skip:
                a = joint_attention_blockskip(x, seg, proj, pos, cfg.heads, cfg.rope, flops)
            else:
                a = joint_attention(x, seg, proj, pos, mask, cfg.heads, cfg.rope, flops)
            h = ad.add(h, a)
            x = ad.rms_norm(h, p[f"{pre}.norm2.gain"])
            x = ad.add(ad.add(x, ad.mul(x, scale2)), shift2)
            gate = ad.silu(ad.linear(x, p[f"{pre}.mlp.w1"]))
            h = ad.add(h, ad.linear(ad.mul(gate, ad.linear(x, p[f"{pre}.mlp.w3"])), p[f"{pre}.mlp.w2"]))

        lo, hi = seg.spans["noise"]
        out = ad.rms_norm(ad.slice_(h, lo, hi, axis=1), p["final_norm.gain"])
        img = unembed_to_image(out, grid, cfg.patch, cfg.channels, p["decode.weight"])
        if not batched:
            img = ad.reshape(img, img.shape[1:])
        return img

    __call__ = forward

    def velocity_fn(self, ref, garment):
        """Closure ``(x, t) -> velocity`` for :func:`euler_sample` (latent space)."""
        def fn(x, t):
            with ad.no_grad():
                return self.forward(x, ref, garment, np.full(np.shape(x)[0] if np.ndim(x) == 4 else 1, t)).data
        return fn


# ----------------------------------------------------------------------
# branch init and freezing


def init_conditional_branches(model: JCoModel) -> None:
    """Copy every block's text&noise (Q, K, V, O) into the c1 and c2 branches."""
    for name in model.names("conditional"):
        m = re.fullmatch(r"(blocks\.\d+\.attn)\.c[12]\.([qkvo])", name)
        src = model.params[f"{m[1]}.tn.{m[2]}"]
        dst = model.params[name]
        dst.data = src.data.copy()
        dst.data.setflags(write=False)


def set_trainable(model: JCoModel, policy: str) -> None:
    """Select which parameters receive gradients.

    ``full`` trains everything; ``conditional_only`` only the c1/c2 projection
    branches; ``conditional_lora`` only the adapters on those branches;
    ``backbone`` everything except the conditional branches and adapters.
    """
    if policy not in POLICIES:
        raise ContractError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if policy == "conditional_lora" and not model.cfg.lora_rank:
        raise ContractError("conditional_lora policy needs lora_rank > 0")
    if policy == "full":
        keep = set(model.params)
    elif policy == "conditional_only":
        keep = set(model.names("conditional"))
    elif policy == "conditional_lora":
        keep = set(model.names("lora"))
    else:
        keep = set(model.names("backbone"))
    for name, t in model.params.items():
        t.requires_grad = name in keep
        t.grad = None
    model.policy = policy


def lora_param_count(cfg: ModelConfig) -> int:
    return cfg.blocks * 2 * len(PROJ_NAMES) * cfg.lora_rank * (cfg.dim + cfg.dim)


# ----------------------------------------------------------------------
# optimisation


class Adam:
    """Adam over a name -> Tensor mapping; rebinds each parameter's array."""

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.b1) * g if m is None else self.b1 * m + (1 - self.b1) * g
            v = (1 - self.b2) * g * g if v is None else self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            if self.lr:
                new = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data = new.astype(p.dtype, copy=False)
                p.data.setflags(write=False)
            p.grad = None


@dataclass
class TripletArrays:
    """Stacked training images in [0, 1]: target R, person P (c1), garment G (c2)."""

    target: np.ndarray
    person: np.ndarray
    garment: np.ndarray
    seeds: np.ndarray

    def __len__(self) -> int:
        return len(self.target)


class Trainer:
    """Rectified-flow training of ``model`` on a fixed set of triplets.

    Randomness for step ``k`` comes from ``default_rng([seed, k])`` so a run is
    reproducible and resumable from (seed, step) alone.
    """

    def __init__(self, model: JCoModel, data: TripletArrays, batch_size: int = 8, lr: float = 1e-3,
                 seed: int = 0, optimizer=None, unconditional: bool = False, step: int = 0):
        self.model = model
        self.data = data
        self.batch_size = batch_size
        self.seed = seed
        self.step = step
        self.opt = optimizer if optimizer is not None else Adam(lr)
        self.unconditional = unconditional
        dt = model.cfg.np_dtype
        self._x0 = to_latent(data.target).astype(dt)
        self._c1 = to_latent(data.person).astype(dt)
        self._c2 = to_latent(data.garment).astype(dt)

    def batch(self, step: int):
        rng = np.random.default_rng([self.seed, step])
        n = len(self.data)
        if self.batch_size <= n:
            idx = np.sort(rng.permutation(n)[: self.batch_size])
        else:
            idx = rng.integers(0, n, size=self.batch_size)
        cfg = self.model.cfg
        t = rng.uniform(0.0, cfg.rf.t_max, size=len(idx))
        x0 = self._x0[idx]
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
        return idx, t, x0, eps

    def loss(self, step: int) -> Tensor:
        cfg = self.model.cfg
        idx, t, x0, eps = self.batch(step)
        xt = rf_interpolate(x0, eps, t.astype(x0.dtype)).astype(x0.dtype)
        target = rf_target(x0, xt, t.astype(x0.dtype), cfg.rf, eps=eps).astype(x0.dtype)
        ref = None if self.unconditional else self._c1[idx]
        garment = None if self.unconditional else self._c2[idx]
        pred = self.model.forward(xt, ref, garment, t)
        return ad.mse(pred, target)

    def train_step(self) -> float:
        loss = self.loss(self.step)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteError(
                f"non-finite loss at step {self.step}; batch rng seed = [{self.seed}, {self.step}]"
            )
        loss.backward()
        self.opt.step(self.model.params)
        self.step += 1
        return value


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: JCoModel, path, step: int = 0, seed: int = 0, extra: dict | None = None) -> None:
    """Directory with ``manifest.json`` and one portable tensor file per parameter."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in model.params.items():
        fname = f"params/{name}.ptnsr"
        ad.save_tensor(path / fname, t.data)
        entries.append({"name": name, "shape": list(t.shape), "file": fname})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "step": int(step),
        "seed": int(seed),
        "policy": model.policy,
        "parameters": entries,
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[JCoModel, dict]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise ContractError(f"{path}: no manifest.json, not a checkpoint")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    cfg = ModelConfig.from_dict(manifest["config"])
    params = {}
    for entry in manifest["parameters"]:
        if entry["name"] in params:
            raise ContractError(f"parameter {entry['name']} listed twice")
        arr = ad.load_tensor(path / entry["file"]).astype(cfg.np_dtype)
        if list(arr.shape) != entry["shape"]:
            raise ContractError(f"{entry['name']}: shape {arr.shape} != manifest {entry['shape']}")
        params[entry["name"]] = Tensor(arr, requires_grad=True)
    return JCoModel(cfg, params), manifest


def transfer_resolution(model: JCoModel, noise_hw, garment_hw=None) -> JCoModel:
    """Reuse every weight at a new image size; positions are rebuilt per forward."""
    new_cfg = replace(model.cfg, noise_hw=tuple(noise_hw),
                      garment_hw=tuple(garment_hw) if garment_hw is not None else model.cfg.garment_hw)
    out = JCoModel(new_cfg, {n: Tensor(t.data, requires_grad=t.requires_grad) for n, t in model.params.items()})
    out.policy = model.policy
    return out


def check_transferable(src: ModelConfig, dst: ModelConfig) -> None:
    if src.architecture() != dst.architecture():
        raise ContractError(
            f"architecture mismatch: checkpoint {src.architecture()} vs requested {dst.architecture()}"
        )


def sample_images(model: JCoModel, person, garment, seed: int, steps: int | None = None) -> np.ndarray:
    """Euler-sample try-on results in [0, 1] for batched or single (person, garment)."""
    from .flow import euler_sample

    person = np.asarray(person)
    single = person.ndim == 3
    if single:
        person = person[None]
        garment = np.asarray(garment)[None]
    dt = model.cfg.np_dtype
    c1 = to_latent(person).astype(dt)
    c2 = to_latent(garment).astype(dt)
    rng = np.random.default_rng(seed)
    C, (H, W) = model.cfg.channels, person.shape[2:]
    x_init = rng.standard_normal((person.shape[0], C, H, W)).astype(dt)
    x = euler_sample(model.velocity_fn(c1, c2), x_init, model.cfg.rf, steps)
    out = from_latent(x).astype(np.float64)
    return out[0] if single else out
