"""Run all three ablation axes on one dataset and print a comparison table.

    python3 scripts/run_ablations.py --data runs/desk/data --init-from runs/desk/pretrain

Starting from a pretrained backbone makes the comparison meaningful; without
--init-from every run starts from random weights.
"""

import argparse
import json
from pathlib import Path

from jco_mvton.cli import main


def run(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for axis in ("mask", "pos_scheme", "policy"):
        report = out / f"ablate_{axis}.json"
        argv = ["ablate", "--axis", axis, "--data", args.data, "--steps", args.steps,
                "--eval-count", args.eval_count, "--report", report]
        if args.init_from:
            argv += ["--init-from", args.init_from]
        if main([str(a) for a in argv]):
            raise SystemExit(f"ablation {axis} failed")
        rep = json.loads(report.read_text())
        print(f"\n[{axis}]")
        for r in rep["runs"]:
            print(f"  {r['tag']:<18} loss {r['final_loss_ma']:.4f}  ssim {r['ssim']:.3f}  "
                  f"psnr {r['psnr'] if isinstance(r['psnr'], str) else round(r['psnr'], 2)}  "
                  f"trainable {r['trainable_parameters']}")
        if "mask_savings" in rep:
            print(f"  mask savings: {rep['mask_savings']}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--init-from")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--eval-count", type=int, default=8)
    p.add_argument("--out", default="runs/ablations")
    run(p.parse_args())
