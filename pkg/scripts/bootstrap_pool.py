"""Grow a dataset with model-in-the-loop bootstrap rounds and summarise retention.

    python3 scripts/bootstrap_pool.py --data runs/desk/data --ckpt runs/desk/ckpt --rounds 3
"""

import argparse
import json
from pathlib import Path

from jco_mvton.cli import main

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--out", default="runs/bootstrap")
    args = p.parse_args()
    src = ["--ckpt", args.ckpt] if args.ckpt else ["--oracle"]
    if main(["bootstrap", *src, "--data", args.data, "--rounds", str(args.rounds), "--out", args.out, "--force"]):
        raise SystemExit("bootstrap failed")
    rep = json.loads((Path(args.out) / "bootstrap_report.json").read_text())
    for r in rep["rounds"]:
        print(f"round {r['round']}: retained {r['retained']}/{r['attempted']}  means {r['mean_scores']}")
