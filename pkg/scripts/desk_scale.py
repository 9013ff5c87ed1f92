"""End-to-end desk-scale run: data, backbone pretraining, conditional training, eval.

    python3 scripts/desk_scale.py --out runs/desk

Writes every artifact under --out and prints a metric table at the end.
"""

import argparse
import json
from pathlib import Path

from jco_mvton.cli import main


def cli(*argv):
    code = main([str(a) for a in argv])
    if code:
        raise SystemExit(f"step failed: {' '.join(map(str, argv))}")


def run(args):
    out = Path(args.out)
    data = out / "data"
    cli("gen-data", "--seed", args.seed, "--count", args.count, "--out", data, "--force")
    cli("-v", "train", "--data", data, "--steps", args.pretrain_steps, "--policy", "backbone",
        "--unconditional", "--out", out / "pretrain")
    cli("-v", "train", "--data", data, "--steps", args.steps, "--policy", args.policy, "--lr", args.lr,
        "--subset", args.subset, "--init-from", out / "pretrain", "--out", out / "ckpt")
    cli("train", "--data", data, "--steps", 0, "--out", out / "untrained")
    rows = {}
    for name in ("untrained", "pretrain", "ckpt"):
        report = out / f"eval_{name}.json"
        cli("eval", "--ckpt", out / name, "--data", data, "--limit", args.subset, "--report", report)
        rows[name] = {m["metric"]: m["value"] for m in json.loads(report.read_text())["metrics"]}
    print(f"\n{'checkpoint':<12}{'ssim':>8}{'psnr':>8}{'frechet':>10}")
    for name, m in rows.items():
        print(f"{name:<12}{m['ssim']:>8.3f}{m['psnr']:>8.2f}{m['toy_frechet']:>10.4f}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--pretrain-steps", type=int, default=6000)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--policy", default="conditional_only")
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--subset", type=int, default=8)
    run(p.parse_args())
