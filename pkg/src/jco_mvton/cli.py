"""Command-line driver: ``jco-mvton {gen-data,train,sample,eval,ablate,bootstrap}``.

Every artifact carries the run's ``config_hash``.  On failure the process
exits nonzero and prints ``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import autodiff as ad
from .attention import FlopCounter
from .config import EVAL_REPORT_SCHEMA, INDEX_SCHEMA, RunConfig, load_config
from .data import (
    PoolRecord,
    bootstrap_round,
    find_round_dir,
    load_pool,
    oracle_generator,
    save_pool,
    stage1_pool,
)
from .errors import ContractError, DimensionError, NonFiniteError
from .metrics import psnr, ssim, toy_frechet
from .model import (
    JCoModel,
    ModelConfig,
    Trainer,
    TripletArrays,
    check_transferable,
    init_conditional_branches,
    load_checkpoint,
    lora_param_count,
    sample_images,
    save_checkpoint,
    set_trainable,
    to_latent,
    transfer_resolution,
)
from .patches import read_ppm, write_ppm

log = logging.getLogger("jco_mvton")

MA_WINDOW = 50


class CliError(RuntimeError):
    """A command refused to run; the message explains why."""


# ----------------------------------------------------------------------------
# helpers


def _json_value(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def pool_arrays(pool: list[PoolRecord]) -> TripletArrays:
    if not pool:
        raise CliError("dataset is empty")
    return TripletArrays(
        target=np.stack([r.sample.reference for r in pool]),
        person=np.stack([r.sample.person for r in pool]),
        garment=np.stack([r.sample.garment for r in pool]),
        seeds=np.array([r.sample.seed for r in pool]),
    )


def _check_data(cfg: ModelConfig, data: TripletArrays) -> None:
    if tuple(data.target.shape[2:]) != cfg.noise_hw or tuple(data.person.shape[2:]) != cfg.noise_hw:
        raise CliError(
            f"data images are {tuple(data.target.shape[2:])} but the config expects noise_hw={cfg.noise_hw}"
        )
    if tuple(data.garment.shape[2:]) != cfg.garment_hw:
        raise CliError(f"garments are {tuple(data.garment.shape[2:])} but the config expects {cfg.garment_hw}")
    if data.target.shape[1] != cfg.channels:
        raise CliError(f"data has {data.target.shape[1]} channels, config expects {cfg.channels}")


def moving_average(values, window: int = MA_WINDOW) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i - window + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def build_model(cfg: RunConfig, init_from: str | None) -> JCoModel:
    """Fresh model, or weights from ``init_from`` placed at the configured resolution.

    Adapters missing from the source checkpoint start from their fresh
    initialisation.  A checkpoint produced by backbone pretraining gets its
    conditional branches re-copied from the text&noise branch.
    """
    fresh = JCoModel(cfg.model)
    if init_from is None:
        return fresh
    src, manifest = load_checkpoint(init_from)
    check_transferable(replace(src.cfg, lora_rank=cfg.model.lora_rank), cfg.model)
    params = {}
    for name, t in fresh.params.items():
        if name in src.params:
            params[name] = ad.Tensor(src.params[name].data, requires_grad=True)
        elif name.endswith((".lora_A", ".lora_B")):
            params[name] = t
        else:
            raise CliError(f"checkpoint {init_from} lacks parameter {name}")
    model = transfer_resolution(JCoModel(replace(src.cfg, lora_rank=cfg.model.lora_rank), params),
                                cfg.model.noise_hw, cfg.model.garment_hw)
    model.cfg = cfg.model
    if manifest.get("policy") == "backbone":
        log.info("initialising conditional branches from the pretrained text&noise branch")
        init_conditional_branches(model)
    return model


def run_training(model: JCoModel, data: TripletArrays, cfg: RunConfig, steps: int,
                 progress: bool = True) -> dict:
    tc = cfg.train
    set_trainable(model, tc.policy)
    frozen = {n: t.data.copy() for n, t in model.params.items() if not t.requires_grad}
    trainer = Trainer(model, data, batch_size=tc.batch_size, lr=tc.lr, seed=tc.seed,
                      unconditional=tc.unconditional)
    losses = []
    for k in range(steps):
        losses.append(trainer.train_step())
        if progress and tc.log_every and (k % tc.log_every == 0 or k == steps - 1):
            log.info("step %d loss %.5f ma %.5f", k, losses[-1], float(np.mean(losses[-MA_WINDOW:])))
    changed = [n for n, a in frozen.items() if not np.array_equal(a, model.params[n].data)]
    ma = moving_average(losses)
    return {
        "losses": losses,
        "moving_average": ma.tolist(),
        "initial_ma": float(np.mean(losses[:MA_WINDOW])) if losses else None,
        "final_ma": float(np.mean(losses[-MA_WINDOW:])) if losses else None,
        "frozen_audit": {"checked": len(frozen), "changed": changed, "passed": not changed},
        "trainable_parameters": model.n_trainable(),
    }


def evaluate(generate, pool: list[PoolRecord], seed: int) -> dict:
    """Score ``generate(sample, seed) -> R'`` against each record's reference."""
    outs, refs, rows = [], [], []
    for rec in pool:
        item_seed = int(np.random.default_rng([seed, rec.id]).integers(2**31))
        out = np.clip(np.asarray(generate(rec.sample, item_seed), dtype=np.float64), 0.0, 1.0)
        ref = rec.sample.reference
        outs.append(out)
        refs.append(ref)
        rows.append({"id": rec.id, "ssim": ssim(out, ref), "psnr": psnr(out, ref)})
    finite_psnr = [r["psnr"] for r in rows]
    return {
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "psnr": float(np.mean(finite_psnr)) if all(map(math.isfinite, finite_psnr)) else math.inf,
        "toy_frechet": toy_frechet(outs, refs) if len(outs) >= 2 else None,
        "per_sample": rows,
    }


def model_generator(model: JCoModel, steps: int | None = None):
    def generate(sample, seed):
        return sample_images(model, sample.person, sample.garment, seed, steps)
    return generate


def _load_data(path, cfg: RunConfig, subset=None) -> list[PoolRecord]:
    pool = load_pool(find_round_dir(path))
    if subset:
        pool = pool[:subset]
    return pool


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> dict:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} exists and is not empty; pass --force to overwrite")
    if args.count < 0:
        raise CliError("--count must be >= 0")
    cfg = load_config(args.config)
    pool = stage1_pool(args.seed, args.count)
    save_pool(pool, out / "round_0")
    index = json.loads((out / "round_0" / "index.json").read_text())
    jsonschema.validate(index, INDEX_SCHEMA)
    h = hashlib.sha256(json.dumps({"seed": args.seed, "count": args.count, "config": cfg.to_dict()},
                                  sort_keys=True).encode()).hexdigest()[:16]
    manifest = {"seed": args.seed, "count": args.count, "config_hash": h, "rounds": ["round_0"]}
    _write_json(out / "dataset.json", manifest)
    return {"records": len(pool), "out": str(out), "config_hash": h,
            "all_scores_one": all(min(r.scores.values()) == 1.0 for r in pool)}


def _train_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    for key in ("policy", "lr", "seed", "subset", "batch_size"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "unconditional", False):
        overrides["unconditional"] = True
    return cfg.with_overrides(train=overrides)


def cmd_train(args) -> dict:
    cfg = _train_config(args)
    pool = _load_data(args.data, cfg, cfg.train.subset)
    data = pool_arrays(pool)
    _check_data(cfg.model, data)
    model = build_model(cfg, args.init_from)
    stats = run_training(model, data, cfg, args.steps)
    out = Path(args.out)
    save_checkpoint(model, out, step=args.steps, seed=cfg.train.seed,
                    extra={"config_hash": cfg.config_hash, "run_config": cfg.to_dict()})
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "moving_average"])
        for k, (l, m) in enumerate(zip(stats["losses"], stats["moving_average"])):
            w.writerow([k, repr(float(l)), repr(float(m))])
    summary = {k: v for k, v in stats.items() if k not in ("losses", "moving_average")}
    summary.update({"config_hash": cfg.config_hash, "steps": args.steps, "policy": cfg.train.policy,
                    "records": len(pool)})
    _write_json(out / "summary.json", summary)
    return summary


def cmd_sample(args) -> dict:
    try:
        model, manifest = load_checkpoint(args.ckpt)
    except (FileNotFoundError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {args.ckpt}: {exc}") from exc
    person = read_ppm(args.person)
    garment = read_ppm(args.garment)
    if model.cfg.pos_scheme == "II" and person.shape[1:] != tuple(model.cfg.noise_hw):
        log.info("sampling at %s (checkpoint trained at %s)", person.shape[1:], model.cfg.noise_hw)
    steps = args.steps or model.cfg.rf.sampler_steps
    out = sample_images(model, person, garment, args.seed, steps)
    write_ppm(args.out, out)
    sidecar = {"steps": steps, "seed": args.seed, "config_hash": manifest.get("config_hash", ""),
               "checkpoint": str(args.ckpt)}
    _write_json(Path(args.out).with_suffix(".json"), sidecar)
    return sidecar


def cmd_eval(args) -> dict:
    pool = load_pool(find_round_dir(args.data))
    if args.limit:
        pool = pool[: args.limit]
    if not pool:
        raise CliError("dataset is empty; nothing to evaluate")
    if args.oracle:
        generate, config_hash, ckpt, steps = oracle_generator, "oracle", "oracle", 1
    else:
        model, manifest = load_checkpoint(args.ckpt)
        steps = args.steps or model.cfg.rf.sampler_steps
        generate = model_generator(model, steps)
        config_hash, ckpt = manifest.get("config_hash", ""), str(args.ckpt)
    res = evaluate(generate, pool, args.seed)
    report = {
        "config_hash": config_hash,
        "checkpoint": ckpt,
        "n_samples": len(pool),
        "sampler_steps": steps,
        "metrics": [
            {"metric": "ssim", "value": res["ssim"], "config_hash": config_hash},
            {"metric": "psnr", "value": _json_value(res["psnr"]), "config_hash": config_hash},
            {"metric": "toy_frechet", "value": res["toy_frechet"] if res["toy_frechet"] is not None else "n/a",
             "config_hash": config_hash},
        ],
        "per_sample": [{**r, "psnr": _json_value(r["psnr"])} for r in res["per_sample"]],
    }
    jsonschema.validate(report, EVAL_REPORT_SCHEMA)
    _write_json(args.report, report)
    return {m["metric"]: m["value"] for m in report["metrics"]}


def _flops_for(model: JCoModel, data: TripletArrays) -> dict:
    counter = FlopCounter()
    with ad.no_grad():
        model.forward(to_latent(data.target[:1]), to_latent(data.person[:1]), to_latent(data.garment[:1]),
                      np.array([0.5]), flops=counter)
    return counter.report()


AXES = {
    "mask": [("mask_on", {"mask_enabled": True}, {}), ("mask_off", {"mask_enabled": False}, {})],
    "pos_scheme": [("scheme_I", {"pos_scheme": "I"}, {}), ("scheme_II", {"pos_scheme": "II"}, {})],
    "policy": [
        ("conditional_only", {}, {"policy": "conditional_only"}),
        ("conditional_lora", {"lora_rank": None}, {"policy": "conditional_lora"}),
    ],
}


def cmd_ablate(args) -> dict:
    if args.axis not in AXES:
        raise CliError(f"unknown axis {args.axis!r}; expected one of {sorted(AXES)}")
    base = load_config(args.config)
    pool = _load_data(args.data, base, args.subset)
    data = pool_arrays(pool)
    _check_data(base.model, data)
    rows = []
    for tag, model_over, train_over in AXES[args.axis]:
        model_over = dict(model_over)
        if "lora_rank" in model_over:
            model_over["lora_rank"] = base.model.lora_rank or args.lora_rank
        cfg = base.with_overrides(model=model_over, train=train_over)
        model = build_model(cfg, args.init_from)
        log.info("ablation %s: %s", args.axis, tag)
        stats = run_training(model, data, cfg, args.steps, progress=False)
        res = evaluate(model_generator(model, cfg.sample.steps), pool[: args.eval_count], cfg.sample.seed)
        row = {
            "tag": tag,
            "config_hash": cfg.config_hash,
            "final_loss_ma": stats["final_ma"],
            "initial_loss_ma": stats["initial_ma"],
            "ssim": res["ssim"],
            "psnr": _json_value(res["psnr"]),
            "trainable_parameters": stats["trainable_parameters"],
            "frozen_audit_passed": stats["frozen_audit"]["passed"],
        }
        if args.axis == "mask":
            row["flops"] = _flops_for(model, data)
        if tag == "conditional_lora":
            row["lora_closed_form"] = lora_param_count(cfg.model)
        rows.append(row)
    report = {"axis": args.axis, "steps": args.steps, "base_config_hash": base.config_hash, "runs": rows}
    if args.axis == "mask":
        m = base.model
        seg = JCoModel(m).segmentation(m.noise_hw, m.noise_hw, m.garment_hw)
        on, off = rows[0]["flops"], rows[1]["flops"]
        report["mask_savings"] = {
            "skipped_qk_macs_per_head_per_block": on.get("skipped_qk_scores", 0) // (m.heads * m.blocks),
            "expected_per_head_per_block": 2 * seg.ref * seg.garment * m.head_dim,
            "dense_minus_blockskip_qk_macs": off["qk_scores"] - on["qk_scores"],
        }
    _write_json(args.report, report)
    return report


def cmd_bootstrap(args) -> dict:
    base = load_config(args.config)
    thresholds = tuple(args.thresholds) if args.thresholds else base.data.thresholds
    src = find_round_dir(args.data)
    pool = load_pool(src)
    if args.oracle:
        generate, config_hash = oracle_generator, "oracle"
    else:
        model, manifest = load_checkpoint(args.ckpt)
        generate, config_hash = model_generator(model, args.steps), manifest.get("config_hash", "")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} exists and is not empty; pass --force to overwrite")
    start = int(src.name.split("_")[1]) if src.name.startswith("round_") else 0
    reports = []
    for k in range(1, args.rounds + 1):
        pool, rr = bootstrap_round(pool, generate, thresholds, start + k, seed=args.seed)
        save_pool(pool, out / f"round_{start + k}")
        reports.append(rr.as_dict())
        log.info("round %d: retained %d/%d", rr.round, rr.retained, rr.attempted)
    report = {"config_hash": config_hash, "thresholds": list(thresholds), "rounds": reports,
              "final_pool": len(pool)}
    _write_json(out / "bootstrap_report.json", report)
    return report


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jco-mvton", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a round_0 pool of oracle triplets")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="rectified-flow training")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init-from", dest="init_from")
    t.add_argument("--policy", choices=["full", "conditional_only", "conditional_lora", "backbone"])
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--subset", type=int, help="train on the first N records only")
    t.add_argument("--unconditional", action="store_true", help="drop person/garment tokens (backbone pretraining)")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate one try-on image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--person", required=True)
    s.add_argument("--garment", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="SSIM / PSNR / toy Frechet against ground truth")
    e.add_argument("--ckpt")
    e.add_argument("--oracle", action="store_true", help="evaluate the exact compositing oracle instead")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--steps", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--limit", type=int)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="paired runs differing on one axis")
    a.add_argument("--axis", required=True)
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--steps", type=int, default=200)
    a.add_argument("--init-from", dest="init_from")
    a.add_argument("--subset", type=int, default=8)
    a.add_argument("--eval-count", dest="eval_count", type=int, default=4)
    a.add_argument("--lora-rank", dest="lora_rank", type=int, default=4)
    a.add_argument("--report", default="ablation.json")
    a.set_defaults(fn=cmd_ablate)

    b = sub.add_parser("bootstrap", help="regenerate, rescore and filter for K rounds")
    b.add_argument("--ckpt")
    b.add_argument("--oracle", action="store_true")
    b.add_argument("--config")
    b.add_argument("--data", required=True)
    b.add_argument("--rounds", type=int, default=3)
    b.add_argument("--thresholds", type=float, nargs=3)
    b.add_argument("--steps", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--force", action="store_true")
    b.set_defaults(fn=cmd_bootstrap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "eval" and not (args.oracle or args.ckpt):
        parser.error("eval needs --ckpt or --oracle")
    if args.command == "bootstrap" and not (args.oracle or args.ckpt):
        parser.error("bootstrap needs --ckpt or --oracle")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            result = args.fn(args)
    except (CliError, ContractError, DimensionError, NonFiniteError, FileNotFoundError,
            jsonschema.ValidationError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True, default=_json_value))
    return 0


if __name__ == "__main__":
    sys.exit(main())
